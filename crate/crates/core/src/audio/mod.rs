//! Waveform I/O, resampling and 80-band log-Mel features.

mod mel;
mod resample;
mod wav;

use thiserror::Error;

pub use mel::{hz_to_mel, log_mel, mel_filterbank, mel_to_hz, MelFeatures, FFT_SIZE, HOP, LOG_FLOOR, N_MELS, WINDOW};
pub use resample::resample;
pub use wav::{read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("waveform has {len} samples; at least {min} are required")]
    TooShort { len: usize, min: usize },
    #[error("expected a {expected} Hz waveform, got {found} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("unsupported WAV format: {0}")]
    Format(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

/// Mono samples in [-1, 1] with their sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, c: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * c).collect(),
            sample_rate: self.sample_rate,
        }
    }
}
