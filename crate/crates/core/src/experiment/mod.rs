//! Experiment orchestration: configuration, pretraining runs with resume,
//! evaluation, scaling sweeps and reports.

mod config;
mod data;
mod evaluate;
mod pretrain;
mod report;
mod sweep;

use thiserror::Error;

pub use config::{DataConfig, EvalSection, ExperimentConfig, FeatureNorm, Init, ModelSection, TrainSection};
pub use data::{batch_for_step, first_caption_examples, load_split, prepare, resolve_audio, train_vocab, training_records};
pub use data::{CorpusSplit, PreparedClip};
pub use evaluate::{run_eval, vocab_for, KEYWORDS, TASKS};
pub use pretrain::{read_log, run_pretrain, towers_for, LogEntry, PretrainOutcome};
pub use pretrain::{CHECKPOINT_NAME, CONFIG_NAME, LOG_NAME, VOCAB_NAME};
pub use report::{fmt_value, report, scaling_svg, ReportOutcome, NO_RESULTS, REPORT_MD, SCALING_SVG};
pub use sweep::{cell_config, mean_by_size, read_sweep_csv, run_scaling_sweep, threads_from_env, write_sweep_csv};
pub use sweep::{SweepRow, SweepSpec, SWEEP_CSV, THREADS_ENV};

use crate::audio::AudioError;
use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::model::ModelError;
use crate::objectives::ObjectiveError;
use crate::tokenizer::TokenizerError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<crate::tensor::TensorError> for ExperimentError {
    fn from(e: crate::tensor::TensorError) -> Self {
        ExperimentError::Model(e.into())
    }
}

impl ExperimentError {
    /// Whether the error stems from invalid input rather than a failure
    /// while running.
    pub fn is_validation(&self) -> bool {
        match self {
            ExperimentError::Config(_) => true,
            ExperimentError::Model(ModelError::Config(_)) => true,
            ExperimentError::Corpus(
                CorpusError::SubsetTooLarge { .. }
                | CorpusError::SubsetOrder(_)
                | CorpusError::CorruptManifest { .. }
                | CorpusError::Consistency { .. }
                | CorpusError::Empty,
            ) => true,
            _ => false,
        }
    }
}
