use std::f64::consts::PI;

use super::Waveform;

const TAPS: i64 = 64;
const HALF: i64 = TAPS / 2;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(x: f64) -> f64 {
    if x.abs() >= HALF as f64 {
        return 0.0;
    }
    let r = x / HALF as f64;
    0.42 + 0.5 * (PI * r).cos() + 0.08 * (2.0 * PI * r).cos()
}

/// Band-limited resampling with a Blackman-windowed sinc, 64 input taps per
/// output sample. Output length is `round(N * target / source)`.
pub fn resample(w: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0 && w.sample_rate > 0, "sample rates must be positive");
    if w.sample_rate == target_rate || w.samples.is_empty() {
        return Waveform::new(w.samples.clone(), target_rate);
    }
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let out_len = (w.samples.len() as f64 / ratio).round() as usize;
    // Lowpass at the narrower of the two Nyquist bands.
    let cutoff = (1.0 / ratio).min(1.0);
    let n_in = w.samples.len() as i64;
    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 * ratio;
            let base = t.floor() as i64;
            let mut acc = 0.0f64;
            for k in (base - HALF + 1)..=(base + HALF) {
                if k < 0 || k >= n_in {
                    continue;
                }
                let x = t - k as f64;
                acc += w.samples[k as usize] as f64 * cutoff * sinc(cutoff * x) * blackman(x);
            }
            acc as f32
        })
        .collect();
    Waveform::new(samples, target_rate)
}
