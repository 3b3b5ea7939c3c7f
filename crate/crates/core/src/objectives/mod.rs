//! Pretraining losses: symmetric InfoNCE over audio/text clip embeddings and
//! caption cross-entropy under autoregressive or parallel (all-MASK)
//! decoding.

mod trainer;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use trainer::{Batch, Example, StepOutcome, TrainConfig, Trainer};

use crate::model::{AudioLanguageModel, ModelError};
use crate::tensor::{Graph, Scalar, TensorError, Var};
use crate::tokenizer::{BOS, EOS, MASK, PAD};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const DEFAULT_PARALLEL_FRACTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("caption target must be BOS … EOS with at least 2 tokens, got {0:?}")]
    BadTarget(Vec<u32>),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("plan covers {plan} samples but the batch has {batch}")]
    PlanMismatch { plan: usize, batch: usize },
    #[error("non-finite loss {loss} at step {step}; batch ids: {ids:?}")]
    NonFinite { step: u64, loss: f64, ids: Vec<String> },
}

impl From<TensorError> for ObjectiveError {
    fn from(e: TensorError) -> Self {
        ObjectiveError::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Contrastive,
    Captioning,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Contrastive => "contrastive",
            Objective::Captioning => "captioning",
        }
    }
}

/// Inverse temperature `1/τ` from the trainable `log τ`, with τ clamped to
/// [`TAU_MIN`, `TAU_MAX`]. Outside the range the value is constant.
pub fn inverse_temperature<T: Scalar>(g: &mut Graph<T>, log_tau: Var) -> Var {
    let lt = g.value(log_tau).data()[0].to_f64();
    if lt < TAU_MIN.ln() || lt > TAU_MAX.ln() {
        let clamped = lt.clamp(TAU_MIN.ln(), TAU_MAX.ln());
        return g.constant(crate::tensor::Tensor::scalar(T::from_f64((-clamped).exp())));
    }
    let neg = g.scale(log_tau, -1.0);
    g.exp(neg)
}

/// Symmetric InfoNCE. Rows of `audio` and `text` (`[N × d]`) are pairs;
/// both are L2-normalized, `S = za·ztᵀ`, and the loss averages the
/// cross-entropy of `S/τ` along rows (audio→text) and columns
/// (text→audio) with the diagonal as targets. Both denominators range over
/// the other modality. Reductions are order-independent, so the value is
/// bit-identical under joint row permutation and modality swap.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<T>, audio: Var, text: Var, inv_tau: Var) -> Result<Var, ObjectiveError> {
    let n = g.shape(audio)[0];
    if n == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let za = g.l2_normalize_rows(audio)?;
    let zt = g.l2_normalize_rows(text)?;
    let ztt = g.transpose(zt)?;
    let sim = g.matmul(za, ztt)?;
    let logits = g.mul_scalar(sim, inv_tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let a2t = g.cross_entropy_sorted(logits, &diag, usize::MAX)?;
    let lt = g.transpose(logits)?;
    let t2a = g.cross_entropy_sorted(lt, &diag, usize::MAX)?;
    let sum = g.add(a2t, t2a)?;
    Ok(g.scale(sum, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Autoregressive,
    Parallel,
}

/// Decoder inputs and labels for one `BOS … EOS` target (trailing PAD is
/// dropped first). Autoregressive inputs are the target without EOS;
/// parallel inputs are MASK tokens of the same length. Labels are the
/// target without BOS in both modes.
pub fn caption_io(target: &[u32], mode: DecodeMode) -> Result<(Vec<u32>, Vec<u32>), ObjectiveError> {
    let end = target.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    let t = &target[..end];
    if t.len() < 2 || t[0] != BOS || t[t.len() - 1] != EOS {
        return Err(ObjectiveError::BadTarget(target.to_vec()));
    }
    let labels = t[1..].to_vec();
    let inputs = match mode {
        DecodeMode::Autoregressive => t[..t.len() - 1].to_vec(),
        DecodeMode::Parallel => vec![MASK; t.len() - 1],
    };
    Ok((inputs, labels))
}

/// Per-sample decoding modes for one minibatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatchPlan {
    pub parallel: Vec<bool>,
}

impl MixedBatchPlan {
    /// Exactly `round(fraction · n)` samples decode in parallel, chosen by
    /// a seeded shuffle.
    pub fn new(n: usize, parallel_fraction: f64, seed: u64) -> Self {
        let k = ((parallel_fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut parallel = vec![false; n];
        for &i in &idx[..k] {
            parallel[i] = true;
        }
        Self { parallel }
    }

    pub fn uniform(n: usize, mode: DecodeMode) -> Self {
        Self {
            parallel: vec![mode == DecodeMode::Parallel; n],
        }
    }

    pub fn n_parallel(&self) -> usize {
        self.parallel.iter().filter(|&&p| p).count()
    }

    pub fn mode(&self, i: usize) -> DecodeMode {
        if self.parallel[i] {
            DecodeMode::Parallel
        } else {
            DecodeMode::Autoregressive
        }
    }
}

/// Audio memory for one caption sample: frames `[T' × d]` plus validity.
#[derive(Clone, Debug)]
pub struct Memory {
    pub frames: Var,
    pub mask: Vec<bool>,
}

/// Token-weighted mean caption cross-entropy over a batch. Every sample
/// decodes in the mode its plan entry selects; all label tokens are scored
/// jointly so each token carries equal weight. Returns the loss and the
/// number of scored tokens.
pub fn mixed_caption_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &AudioLanguageModel,
    memories: &[Memory],
    targets: &[Vec<u32>],
    plan: &MixedBatchPlan,
) -> Result<(Var, usize), ObjectiveError> {
    if memories.is_empty() || memories.len() != targets.len() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if plan.parallel.len() != targets.len() {
        return Err(ObjectiveError::PlanMismatch {
            plan: plan.parallel.len(),
            batch: targets.len(),
        });
    }
    let mut logits = Vec::with_capacity(targets.len());
    let mut labels = Vec::new();
    for (i, (mem, target)) in memories.iter().zip(targets).enumerate() {
        let mode = plan.mode(i);
        let (inputs, lab) = caption_io(target, mode)?;
        let causal = mode == DecodeMode::Autoregressive;
        logits.push(model.decode_graph(g, mem.frames, &mem.mask, &inputs, causal)?);
        labels.extend(lab.into_iter().map(|t| t as usize));
    }
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    let count = labels.iter().filter(|&&t| t != PAD as usize).count();
    Ok((g.cross_entropy(all, &labels, PAD as usize)?, count))
}

/// Teacher-forced autoregressive caption loss for one sample.
pub fn caption_ar_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &AudioLanguageModel,
    memory: &Memory,
    target: &[u32],
) -> Result<Var, ObjectiveError> {
    let plan = MixedBatchPlan::uniform(1, DecodeMode::Autoregressive);
    Ok(mixed_caption_loss(g, model, std::slice::from_ref(memory), &[target.to_vec()], &plan)?.0)
}

/// Parallel (all-MASK, non-causal) caption loss for one sample.
pub fn caption_parallel_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &AudioLanguageModel,
    memory: &Memory,
    target: &[u32],
) -> Result<Var, ObjectiveError> {
    let plan = MixedBatchPlan::uniform(1, DecodeMode::Parallel);
    Ok(mixed_caption_loss(g, model, std::slice::from_ref(memory), &[target.to_vec()], &plan)?.0)
}
