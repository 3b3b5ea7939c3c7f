use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{retrieval_eval, rouge_l};
use super::EvalError;
use crate::model::text::is_cross_attention;
use crate::model::{AudioLanguageModel, FrameEmbeddings};
use crate::objectives::{Example, Objective, TrainConfig, Trainer};
use crate::tensor::{Adam, Graph, ParamStore};
use crate::tokenizer::{BpeVocab, BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Retrieval,
    Captioning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub steps: u64,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    /// Generation budget for captioning evaluation.
    pub max_caption_len: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            batch: 16,
            seed: 0,
            max_caption_len: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignOutcome {
    pub metric_name: String,
    pub value: f64,
    pub n_eval: usize,
}

pub fn is_audio_param(name: &str) -> bool {
    name.starts_with("audio/")
}

fn trainable(mode: AlignMode) -> fn(&str) -> bool {
    match mode {
        AlignMode::Retrieval => |n: &str| n.starts_with("text_enc/") || n.starts_with("head/"),
        AlignMode::Captioning => is_cross_attention,
    }
}

fn audio_snapshot(p: &ParamStore) -> Vec<(String, Vec<u32>)> {
    p.iter()
        .filter(|(n, _)| is_audio_param(n))
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

/// Frame embeddings for one example from an inference pass.
pub fn encode_example(model: &AudioLanguageModel, ex: &Example) -> Result<FrameEmbeddings, EvalError> {
    let mut g = Graph::<f32>::inference();
    let enc = model.audio_graph(&mut g, &ex.mel, ex.valid)?;
    Ok(FrameEmbeddings::new(g.value(enc.frames).clone(), enc.mask))
}

/// Shared-space audio and text embeddings for each example.
pub fn clip_embeddings(model: &AudioLanguageModel, examples: &[Example]) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>), EvalError> {
    let mut audio = Vec::with_capacity(examples.len());
    let mut text = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut g = Graph::<f32>::inference();
        let enc = model.audio_graph(&mut g, &ex.mel, ex.valid)?;
        let z = model.audio_clip_graph(&mut g, &enc)?;
        audio.push(g.value(z).data().to_vec());
        text.push(model.encode_text(&ex.tokens)?);
    }
    Ok((audio, text))
}

/// Text-to-audio recall@1 over `examples`.
pub fn retrieval_recall_at_1(model: &AudioLanguageModel, examples: &[Example]) -> Result<f64, EvalError> {
    let (a, t) = clip_embeddings(model, examples)?;
    Ok(retrieval_eval(&a, &t, &[1])?.text_to_audio[&1])
}

/// Mean RougeL of greedy captions against the reference tokens.
pub fn caption_rouge(model: &AudioLanguageModel, vocab: &BpeVocab, examples: &[Example], max_len: usize) -> Result<f64, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty("caption eval set"));
    }
    let mut total = 0.0;
    for ex in examples {
        let memory = encode_example(model, ex)?;
        let hyp = model.generate(&memory, max_len)?;
        let reference: Vec<u32> = ex.tokens.iter().copied().filter(|&t| t != BOS && t != EOS && t != 0).collect();
        total += rouge_l(&vocab.decode(&hyp)?, &vocab.decode(&reference)?);
    }
    Ok(total / examples.len() as f64)
}

/// Finetunes the text side against the frozen audio encoder, then scores
/// it on `eval`. Retrieval mode trains the text encoder and projection
/// heads contrastively; captioning mode trains only decoder
/// cross-attention with teacher-forced autoregressive loss.
pub fn run_alignment(
    model: &mut AudioLanguageModel,
    train: &[Example],
    eval: &[Example],
    mode: AlignMode,
    cfg: &AlignConfig,
    vocab: &BpeVocab,
) -> Result<AlignOutcome, EvalError> {
    if train.is_empty() {
        return Err(EvalError::Empty("alignment training set"));
    }
    let towers = model.towers();
    let objective = match mode {
        AlignMode::Retrieval => {
            if !towers.text_encoder {
                model.add_text_encoder(cfg.seed.wrapping_add(11));
            }
            Objective::Contrastive
        }
        AlignMode::Captioning => {
            if !towers.decoder {
                model.add_decoder(cfg.seed.wrapping_add(12));
            }
            Objective::Captioning
        }
    };
    let before = audio_snapshot(&model.params);
    let mut tc = TrainConfig::new(objective);
    tc.adam = Adam::with_lr(cfg.lr);
    tc.parallel_fraction = 0.0;
    tc.seed = cfg.seed;
    let mut trainer = Trainer::new(model.clone(), tc).with_trainable(trainable(mode));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let batch = cfg.batch.clamp(1, train.len());
    for _ in 0..cfg.steps {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picked: Vec<Example> = order.drain(..batch).map(|i| train[i].clone()).collect();
        trainer.train_step(&picked)?;
    }
    *model = trainer.model;
    let after = audio_snapshot(&model.params);
    if let Some(((name, _), _)) = before.iter().zip(&after).find(|(a, b)| a != b) {
        return Err(EvalError::FrozenViolation(name.clone()));
    }
    if before.len() != after.len() {
        return Err(EvalError::FrozenViolation("audio parameter set changed".into()));
    }
    let (metric_name, value) = match mode {
        AlignMode::Retrieval => ("recall@1", retrieval_recall_at_1(model, eval)?),
        AlignMode::Captioning => ("rougeL", caption_rouge(model, vocab, eval, cfg.max_caption_len)?),
    };
    Ok(AlignOutcome {
        metric_name: metric_name.into(),
        value,
        n_eval: eval.len(),
    })
}
