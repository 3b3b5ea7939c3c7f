use serde::{Deserialize, Serialize};

use super::ModelError;

/// Frame rate after the stride-2 convolutional frontend.
pub const FRONTEND_RATE_HZ: f64 = 50.0;
/// Resolution level (number of factor-2 steps below 50 Hz) of each stage.
pub const STAGE_LEVELS: [u32; 6] = [0, 1, 2, 3, 2, 1];
/// Mel frames needed for the coarsest stage to keep at least one frame.
pub const MIN_MEL_FRAMES: usize = 16;
pub const MAX_FRAMES: usize = 4096;
pub const MAX_TOKENS: usize = 2048;

/// Multi-resolution audio encoder: six transformer stages in a U shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub stage_blocks: Vec<usize>,
    pub stage_rates_hz: Vec<f64>,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 192,
            stage_blocks: vec![2, 2, 3, 4, 3, 2],
            stage_rates_hz: vec![50.0, 25.0, 12.5, 6.25, 12.5, 25.0],
            heads: 4,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    /// Full-scale width.
    pub fn full() -> Self {
        Self {
            dim: 768,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn n_layers(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.stage_blocks.len() != 6 || self.stage_rates_hz.len() != 6 {
            return bad(format!(
                "need 6 stages, got {} block counts and {} rates",
                self.stage_blocks.len(),
                self.stage_rates_hz.len()
            ));
        }
        for (i, (&rate, &level)) in self.stage_rates_hz.iter().zip(&STAGE_LEVELS).enumerate() {
            let expected = FRONTEND_RATE_HZ / f64::from(1u32 << level);
            if (rate - expected).abs() > 1e-9 {
                return bad(format!("stage {i} runs at {rate} Hz; the U shape requires {expected} Hz"));
            }
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        Ok(())
    }
}

/// Text side. The contrastive text encoder has twice as many layers as the
/// captioning decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 192,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

impl DecoderConfig {
    pub fn encoder_layers(&self) -> usize {
        2 * self.layers
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "text dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(ModelError::Config("text ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vocab_size: usize,
    /// Width of the shared audio–text embedding space.
    pub shared_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            vocab_size: crate::tokenizer::DEFAULT_VOCAB,
            shared_dim: 128,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for tests and overfitting checks.
    pub fn micro(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                dim: 32,
                stage_blocks: vec![1; 6],
                heads: 2,
                ffn_mult: 2,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                layers: 1,
                dim: 32,
                heads: 2,
                ffn_mult: 2,
            },
            vocab_size,
            shared_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.vocab_size < crate::tokenizer::BASE_VOCAB {
            return Err(ModelError::Config(format!("vocab_size {} below 260", self.vocab_size)));
        }
        if self.shared_dim == 0 {
            return Err(ModelError::Config("shared_dim must be positive".into()));
        }
        Ok(())
    }
}
