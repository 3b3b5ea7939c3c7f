use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioError, Waveform, SAMPLE_RATE};
use crate::tensor::Tensor;

pub const N_MELS: usize = 80;
/// 25 ms at 16 kHz.
pub const WINDOW: usize = 400;
/// 10 ms at 16 kHz.
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;
const F_MAX: f64 = 8000.0;

/// Log-Mel matrix `[frames × 80]` at 100 frames per second.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFeatures {
    pub frames: Tensor,
}

impl MelFeatures {
    pub const FRAME_RATE: f64 = 100.0;

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Frames for an `n`-sample 16 kHz input (no padding).
    pub fn expected_frames(n: usize) -> usize {
        if n < WINDOW {
            0
        } else {
            (n - WINDOW) / HOP + 1
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK filters over the `FFT_SIZE/2 + 1` power bins, spanning
/// 0–8000 Hz; triangles are linear in mel. Row `m` is filter `m`.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let n_bins = FFT_SIZE / 2 + 1;
    let mel_max = hz_to_mel(F_MAX);
    let edges: Vec<f64> = (0..N_MELS + 2).map(|i| mel_max * i as f64 / (N_MELS + 1) as f64).collect();
    let bin_mels: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64))
        .collect();
    (0..N_MELS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            bin_mels
                .iter()
                .map(|&b| {
                    if b > lo && b <= mid {
                        (b - lo) / (mid - lo)
                    } else if b > mid && b < hi {
                        (hi - b) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// 80-band log-Mel features: 400-sample Hann frames every 160 samples,
/// 512-point FFT power spectrum, natural log floored at 1e-10.
pub fn log_mel(w: &Waveform) -> Result<MelFeatures, AudioError> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(AudioError::SampleRate {
            expected: SAMPLE_RATE,
            found: w.sample_rate,
        });
    }
    if w.samples.len() < WINDOW {
        return Err(AudioError::TooShort {
            len: w.samples.len(),
            min: WINDOW,
        });
    }
    let n_frames = MelFeatures::expected_frames(w.samples.len());
    let window = hann(WINDOW);
    let bank = mel_filterbank();
    // Each filter touches a contiguous bin range; iterate only over it.
    let supports: Vec<(usize, usize)> = bank
        .iter()
        .map(|row| {
            let first = row.iter().position(|&v| v > 0.0).unwrap_or(0);
            let last = row.iter().rposition(|&v| v > 0.0).map_or(0, |l| l + 1);
            (first, last)
        })
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut power = vec![0.0f64; FFT_SIZE / 2 + 1];
    let mut out = Vec::with_capacity(n_frames * N_MELS);
    for t in 0..n_frames {
        let frame = &w.samples[t * HOP..t * HOP + WINDOW];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < WINDOW {
                Complex::new(frame[i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (row, &(a, b)) in bank.iter().zip(&supports) {
            let e: f64 = (a..b).map(|k| row[k] * power[k]).sum();
            out.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    Ok(MelFeatures {
        frames: Tensor::new(vec![n_frames, N_MELS], out).expect("frame buffer sized"),
    })
}
