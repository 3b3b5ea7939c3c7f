use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::model::{DecoderConfig, EncoderConfig, ModelConfig};
use crate::objectives::{Objective, DEFAULT_PARALLEL_FRACTION};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Scratch,
    /// Audio-encoder weights are loaded from this checkpoint.
    Checkpoint(PathBuf),
}

impl Init {
    pub fn label(&self) -> &'static str {
        match self {
            Init::Scratch => "scratch",
            Init::Checkpoint(_) => "init",
        }
    }
}

/// Normalization applied to log-Mel features before the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureNorm {
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Training records drawn from the pool; `None` uses all of it.
    pub subset_size: Option<usize>,
    /// Seed of the nested-subset shuffle.
    pub seed: u64,
    /// Records held out for evaluation before any subset is drawn.
    pub eval_size: usize,
    pub holdout_seed: u64,
    pub max_duration: f64,
    pub blocklist: Option<PathBuf>,
    #[serde(default)]
    pub feature_norm: FeatureNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub shared_dim: usize,
    /// Target BPE vocabulary; the trained vocabulary may be smaller.
    pub vocab_size: usize,
}

impl ModelSection {
    pub fn micro() -> Self {
        let m = ModelConfig::micro(400);
        Self {
            encoder: m.encoder,
            decoder: m.decoder,
            shared_dim: m.shared_dim,
            vocab_size: 400,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            vocab_size,
            shared_dim: self.shared_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: u64,
    pub lr: f32,
    pub batch: usize,
    /// Share of each captioning batch decoded in parallel mode.
    pub parallel_fraction: f64,
    pub warmup_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            batch: 32,
            parallel_fraction: DEFAULT_PARALLEL_FRACTION,
            warmup_steps: 100,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub tasks: Vec<String>,
    pub align_steps: u64,
    pub probe_epochs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: vec!["retrieval".into()],
            align_steps: 300,
            probe_epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub objective: Objective,
    pub init: Init,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Micro-scale defaults over `manifest`.
    pub fn new(objective: Objective, manifest: impl Into<PathBuf>) -> Self {
        Self {
            objective,
            init: Init::Scratch,
            data: DataConfig {
                manifest: manifest.into(),
                subset_size: None,
                seed: 0,
                eval_size: 0,
                holdout_seed: 0,
                max_duration: 60.0,
                blocklist: None,
                feature_norm: FeatureNorm::None,
            },
            model: ModelSection::micro(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.into()));
        if self.train.batch == 0 {
            return bad("train.batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.train.parallel_fraction) {
            return bad("train.parallel_fraction must lie in [0, 1]");
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return bad("train.lr must be a non-negative number");
        }
        if self.data.subset_size == Some(0) {
            return bad("data.subset_size must be positive");
        }
        self.model.model_config(self.model.vocab_size.max(crate::tokenizer::BASE_VOCAB)).validate()?;
        Ok(())
    }

    /// Compact JSON with struct fields in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
