//! Frozen-representation evaluation: pooling, linear probes, text-side
//! alignment, retrieval and captioning metrics, and result reports.

mod align;
pub mod metrics;
mod pool;
mod probe;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use align::{caption_rouge, clip_embeddings, encode_example, is_audio_param, retrieval_recall_at_1, run_alignment};
pub use align::{AlignConfig, AlignMode, AlignOutcome};
pub use metrics::{compute_map, retrieval_eval, rouge_l, MapResult, RetrievalResult, ROUGE_BETA};
pub use pool::{init_mhap, mhap_graph, pool_mean, pool_mhap, Pooling, MHAP_HEADS};
pub use probe::{argmax, train_probe, LabelKind, Probe, ProbeConfig, ProbeMetric, ProbeResult, ProbeTask};

use crate::model::ModelError;
use crate::objectives::ObjectiveError;
use crate::tensor::{load_tensors, save_tensors, Tensor, TensorError};
use crate::tokenizer::TokenizerError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no class has a positive label")]
    NoPositives,
    #[error("invalid task: {0}")]
    Task(String),
    #[error("frozen audio parameter `{0}` changed during alignment")]
    FrozenViolation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Model(e.into())
    }
}

/// One evaluated number with enough context to trace it to its run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub task: String,
    pub pooling: String,
    pub metric_name: String,
    pub value: f64,
    pub n_eval: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub const EMBEDDING_PREFIX: &str = "emb/";

/// Writes clip embeddings as `emb/<id>` tensors in checkpoint format.
pub fn export_embeddings(path: &Path, items: &[(String, Vec<f32>)]) -> Result<(), EvalError> {
    let tensors = items
        .iter()
        .map(|(id, v)| Ok((format!("{EMBEDDING_PREFIX}{id}"), Tensor::new(vec![v.len()], v.clone())?)))
        .collect::<Result<Vec<_>, TensorError>>()?;
    save_tensors(path, tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(())
}

pub fn import_embeddings(path: &Path) -> Result<Vec<(String, Vec<f32>)>, EvalError> {
    Ok(load_tensors(path)?
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix(EMBEDDING_PREFIX).map(|id| (id.to_string(), t.into_data())))
        .collect())
}
