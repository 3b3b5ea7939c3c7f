use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{contrastive_loss, inverse_temperature, mixed_caption_loss, Memory, MixedBatchPlan, Objective, ObjectiveError};
use super::{DEFAULT_PARALLEL_FRACTION, TAU_MAX, TAU_MIN};
use crate::model::AudioLanguageModel;
use crate::tensor::{clip_grad_norm, Adam, AdamState, Graph, Tensor};

/// One audio–caption pair ready for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    /// Log-Mel frames `[T × 80]`; rows past `valid` are padding.
    pub mel: Tensor,
    pub valid: usize,
    /// `BOS … EOS` caption tokens.
    pub tokens: Vec<u32>,
}

pub type Batch = Vec<Example>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub adam: Adam,
    pub warmup_steps: u64,
    pub max_grad_norm: f32,
    /// Fraction of each captioning batch decoded in parallel mode.
    pub parallel_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            adam: Adam::default(),
            warmup_steps: 0,
            max_grad_norm: 5.0,
            parallel_fraction: DEFAULT_PARALLEL_FRACTION,
            seed: 0,
        }
    }

    /// Learning rate for the update that follows `completed` updates.
    pub fn lr_at(&self, completed: u64) -> f32 {
        if self.warmup_steps == 0 {
            return self.adam.lr;
        }
        let frac = ((completed + 1) as f64 / self.warmup_steps as f64).min(1.0);
        (self.adam.lr as f64 * frac) as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub tau: Option<f64>,
    pub lr: f32,
    pub grad_norm: f32,
    /// Scored caption tokens, or pairs for the contrastive objective.
    pub weight: usize,
}

type Trainable = Arc<dyn Fn(&str) -> bool + Send + Sync>;

/// Owns a model and its optimizer state and applies one update per call.
pub struct Trainer {
    pub model: AudioLanguageModel,
    pub config: TrainConfig,
    pub opt: AdamState,
    trainable: Option<Trainable>,
}

fn mix(seed: u64, step: u64, part: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ part.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Trainer {
    pub fn new(model: AudioLanguageModel, config: TrainConfig) -> Self {
        Self {
            model,
            config,
            opt: AdamState::default(),
            trainable: None,
        }
    }

    /// Restricts updates to parameters whose names pass `filter`; all
    /// others stay bit-identical.
    pub fn with_trainable(mut self, filter: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        self.trainable = Some(Arc::new(filter));
        self
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn tau(&self) -> Option<f64> {
        self.model
            .params
            .get("head/log_tau")
            .map(|t| (t.data()[0] as f64).exp().clamp(TAU_MIN, TAU_MAX))
    }

    fn graph(&self) -> Graph<f32> {
        let mut g = Graph::new();
        if let Some(f) = &self.trainable {
            let f = Arc::clone(f);
            g.set_param_filter(move |n| f(n));
        }
        g
    }

    /// Loss and parameter gradients for one batch, without updating.
    pub fn gradients(&self, batch: &[Example], part: u64) -> Result<(f64, BTreeMap<String, Tensor>, usize), ObjectiveError> {
        if batch.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        let mut g = self.graph();
        let model = &self.model;
        let (loss, weight) = match self.config.objective {
            Objective::Contrastive => {
                let mut za = Vec::with_capacity(batch.len());
                let mut zt = Vec::with_capacity(batch.len());
                for ex in batch {
                    let enc = model.audio_graph(&mut g, &ex.mel, ex.valid)?;
                    za.push(model.audio_clip_graph(&mut g, &enc)?);
                    zt.push(model.text_clip_graph(&mut g, &ex.tokens)?);
                }
                let a = if za.len() == 1 { za[0] } else { g.concat_rows(&za)? };
                let t = if zt.len() == 1 { zt[0] } else { g.concat_rows(&zt)? };
                let log_tau = g.param("head/log_tau", model.params.require("head/log_tau")?);
                let inv_tau = inverse_temperature(&mut g, log_tau);
                (contrastive_loss(&mut g, a, t, inv_tau)?, batch.len())
            }
            Objective::Captioning => {
                let mut memories = Vec::with_capacity(batch.len());
                for ex in batch {
                    let enc = model.audio_graph(&mut g, &ex.mel, ex.valid)?;
                    memories.push(Memory {
                        frames: enc.frames,
                        mask: enc.mask,
                    });
                }
                let targets: Vec<Vec<u32>> = batch.iter().map(|e| e.tokens.clone()).collect();
                let plan = MixedBatchPlan::new(
                    batch.len(),
                    self.config.parallel_fraction,
                    mix(self.config.seed, self.opt.step, part),
                );
                mixed_caption_loss(&mut g, model, &memories, &targets, &plan)?
            }
        };
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite {
                step: self.opt.step,
                loss: value,
                ids: batch.iter().map(|e| e.id.clone()).collect(),
            });
        }
        let grads = g.backward(loss)?;
        Ok((value, g.param_grads(&grads), weight))
    }

    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepOutcome, ObjectiveError> {
        self.accumulate_step(&[batch])
    }

    /// One update from several micro-batches. Losses and gradients are
    /// averaged with weights equal to each micro-batch's token count
    /// (captioning) or pair count (contrastive).
    pub fn accumulate_step(&mut self, micro: &[&[Example]]) -> Result<StepOutcome, ObjectiveError> {
        if micro.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        let mut parts = Vec::with_capacity(micro.len());
        for (i, b) in micro.iter().enumerate() {
            parts.push(self.gradients(b, i as u64)?);
        }
        let total: usize = parts.iter().map(|p| p.2).sum();
        let (loss, mut grads, weight) = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            let mut loss = 0.0;
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            for (l, grads, w) in parts {
                let k = w as f32 / total.max(1) as f32;
                loss += l * w as f64 / total.max(1) as f64;
                for (name, gr) in grads {
                    let slot = acc.entry(name).or_insert_with(|| Tensor::zeros(gr.shape()));
                    for (a, b) in slot.data_mut().iter_mut().zip(gr.data()) {
                        *a += k * b;
                    }
                }
            }
            (loss, acc, total)
        };
        let grad_norm = clip_grad_norm(&mut grads, self.config.max_grad_norm);
        let lr = self.config.lr_at(self.opt.step);
        let hp = Adam { lr, ..self.config.adam };
        self.opt.step(&mut self.model.params, &grads, &hp);
        if let Some(t) = self.model.params.get_mut("head/log_tau") {
            let v = &mut t.data_mut()[0];
            *v = v.clamp(TAU_MIN.ln() as f32, TAU_MAX.ln() as f32);
        }
        Ok(StepOutcome {
            loss,
            tau: self.tau(),
            lr,
            grad_norm,
            weight,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Towers};
    use crate::tokenizer::{BOS, EOS};

    fn example(id: &str, seed: u64, tokens: Vec<u32>) -> Example {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..20 * 80).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Example {
            id: id.into(),
            mel: Tensor::new(vec![20, 80], data).unwrap(),
            valid: 20,
            tokens,
        }
    }

    fn batch() -> Vec<Example> {
        vec![
            example("a", 1, vec![BOS, 300, 301, EOS]),
            example("b", 2, vec![BOS, 302, EOS]),
        ]
    }

    #[test]
    fn zero_lr_leaves_weights_bit_identical() {
        for obj in [Objective::Contrastive, Objective::Captioning] {
            let model = AudioLanguageModel::new(ModelConfig::micro(320), Towers::BOTH, 3).unwrap();
            let before = model.params.clone();
            let mut cfg = TrainConfig::new(obj);
            cfg.adam.lr = 0.0;
            let mut tr = Trainer::new(model, cfg);
            tr.train_step(&batch()).unwrap();
            assert_eq!(tr.model.params, before);
        }
    }

    #[test]
    fn warmup_is_linear() {
        let mut c = TrainConfig::new(Objective::Captioning);
        c.adam.lr = 1.0;
        c.warmup_steps = 4;
        let lrs: Vec<f32> = (0..6).map(|s| c.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_finite_loss_reports_batch_ids() {
        let model = AudioLanguageModel::new(ModelConfig::micro(320), Towers::CAPTIONING, 3).unwrap();
        let mut tr = Trainer::new(model, TrainConfig::new(Objective::Captioning));
        let mut b = batch();
        b[1].mel.data_mut()[5] = f32::NAN;
        match tr.train_step(&b) {
            Err(ObjectiveError::NonFinite { ids, .. }) => assert_eq!(ids, vec!["a", "b"]),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn frozen_params_do_not_move() {
        let model = AudioLanguageModel::new(ModelConfig::micro(320), Towers::CAPTIONING, 3).unwrap();
        let before = model.params.clone();
        let mut tr = Trainer::new(model, TrainConfig::new(Objective::Captioning)).with_trainable(|n| n.starts_with("text_dec/"));
        tr.train_step(&batch()).unwrap();
        for (name, t) in before.iter() {
            let same = tr.model.params.get(name).unwrap() == t;
            assert_eq!(same, !name.starts_with("text_dec/"), "{name}");
        }
    }
}
