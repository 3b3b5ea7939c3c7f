//! Synthetic audio–caption corpus whose captions verbalize the parameters
//! that generated each clip.

use std::f64::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_wav, AudioError, Waveform, SAMPLE_RATE};
use crate::corpus::{Domain, ManifestLine};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const SOURCE_NAME: &str = "synth";
/// Every `ALT_CAPTION_PERIOD`-th clip gets a second caption in another style.
pub const ALT_CAPTION_PERIOD: usize = 16;
const MIN_SECS: f64 = 0.5;
const MAX_SECS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    /// Relative share of each domain.
    pub domains: Vec<(Domain, f64)>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_pairs: usize, seed: u64) -> Self {
        Self {
            n_pairs,
            domains: Domain::ALL.iter().map(|&d| (d, 1.0)).collect(),
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_pairs == 0 {
            return Err(SynthError::Spec("n_pairs must be positive".into()));
        }
        if self.domains.is_empty() || self.domains.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(SynthError::Spec("domain weights must be non-negative".into()));
        }
        if self.domains.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
            return Err(SynthError::Spec("domain weights sum to zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    const ALL: [Band; 3] = [Band::Low, Band::Mid, Band::High];

    fn word(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::Mid => "mid",
            Band::High => "high",
        }
    }

    /// Base frequency range in Hz.
    fn range(self) -> (f64, f64) {
        match self {
            Band::Low => (220.0, 380.0),
            Band::Mid => (800.0, 1200.0),
            Band::High => (2600.0, 3400.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Tone,
    Noise,
    RisingChirp,
    FallingChirp,
    AscendingMelody,
    DescendingMelody,
}

impl Kind {
    fn domain(self) -> Domain {
        match self {
            Kind::Tone | Kind::Noise => Domain::Sound,
            Kind::RisingChirp | Kind::FallingChirp => Domain::Speech,
            Kind::AscendingMelody | Kind::DescendingMelody => Domain::Music,
        }
    }

    fn of_domain(d: Domain) -> [Kind; 2] {
        match d {
            Domain::Sound => [Kind::Tone, Kind::Noise],
            Domain::Speech => [Kind::RisingChirp, Kind::FallingChirp],
            Domain::Music => [Kind::AscendingMelody, Kind::DescendingMelody],
        }
    }
}

/// Generator parameters for one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipParams {
    pub kind: Kind,
    pub band: Band,
    /// Number of events (notes for melodies).
    pub count: usize,
    pub loud: bool,
    pub fast: bool,
}

const COUNT_WORDS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];

impl ClipParams {
    fn grid(domain: Domain) -> Vec<ClipParams> {
        let mut out = Vec::new();
        for kind in Kind::of_domain(domain) {
            for band in Band::ALL {
                for count in 1..=5 {
                    for loud in [false, true] {
                        for fast in [false, true] {
                            let count = if kind.domain() == Domain::Music { count + 1 } else { count };
                            out.push(ClipParams {
                                kind,
                                band,
                                count,
                                loud,
                                fast,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn caption(&self) -> String {
        let n = COUNT_WORDS[self.count];
        let loud = if self.loud { "loud" } else { "quiet" };
        let pace = if self.fast { "short" } else { "long" };
        let band = self.band.word();
        let plural = if self.count == 1 { "" } else { "s" };
        match self.kind {
            Kind::Tone => format!("{n} {loud} {pace} {band} beep{plural}"),
            Kind::Noise => format!("{n} {loud} {pace} {band} burst{plural} of noise"),
            Kind::RisingChirp => format!("{n} {loud} {pace} {band} rising voice chirp{plural}"),
            Kind::FallingChirp => format!("{n} {loud} {pace} {band} falling voice chirp{plural}"),
            Kind::AscendingMelody | Kind::DescendingMelody => {
                let dir = if self.kind == Kind::AscendingMelody { "ascending" } else { "descending" };
                let tempo = if self.fast { "fast" } else { "slow" };
                format!("a {tempo} {loud} {dir} melody of {n} {band} notes")
            }
        }
    }

    /// Same content, different phrasing.
    pub fn alt_caption(&self) -> String {
        let volume = if self.loud { "loudly" } else { "softly" };
        let pace = if self.fast { "quickly" } else { "slowly" };
        let times = match self.count {
            1 => "once".to_string(),
            2 => "twice".to_string(),
            n => format!("{} times", COUNT_WORDS[n]),
        };
        let band = self.band.word();
        match self.kind {
            Kind::Tone => format!("a {band} pitched beep sounds {volume} and {pace} {times}"),
            Kind::Noise => format!("{band} frequency noise bursts {volume} and {pace} {times}"),
            Kind::RisingChirp => format!("a {band} voice chirps upward {volume} and {pace} {times}"),
            Kind::FallingChirp => format!("a {band} voice chirps downward {volume} and {pace} {times}"),
            Kind::AscendingMelody | Kind::DescendingMelody => {
                let dir = if self.kind == Kind::AscendingMelody { "rising" } else { "falling" };
                format!("{} {band} notes played {volume} and {pace} in a {dir} line", COUNT_WORDS[self.count])
            }
        }
    }

    fn event_secs(&self) -> (f64, f64) {
        if self.fast {
            (0.15, 0.08)
        } else {
            (0.4, 0.2)
        }
    }

    pub fn duration_secs(&self) -> f64 {
        let (on, gap) = self.event_secs();
        (self.count as f64 * (on + gap) + 0.1).clamp(MIN_SECS.max(0.6), MAX_SECS)
    }

    /// Renders the clip at 16 kHz. Fine frequency and noise vary with `rng`.
    pub fn render(&self, rng: &mut ChaCha8Rng) -> Waveform {
        let sr = SAMPLE_RATE as f64;
        let n = (self.duration_secs() * sr).round() as usize;
        let mut out: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * 0.003).collect();
        let (lo, hi) = self.band.range();
        let base = rng.gen_range(lo..hi);
        let amp = if self.loud { 0.6 } else { 0.15 };
        let (on, gap) = self.event_secs();
        let on_n = (on * sr) as usize;
        let mut resonator = Resonator::new(base, sr);
        for e in 0..self.count {
            let start = ((0.05 + e as f64 * (on + gap)) * sr) as usize;
            let freq_at = |frac: f64| match self.kind {
                Kind::RisingChirp => base * (1.0 + 0.5 * frac),
                Kind::FallingChirp => base * (1.5 - 0.5 * frac),
                Kind::AscendingMelody => base * 2f64.powf(2.0 * e as f64 / 12.0),
                Kind::DescendingMelody => base * 2f64.powf(2.0 * (self.count - 1 - e) as f64 / 12.0),
                _ => base,
            };
            let mut phase = 0.0;
            for i in 0..on_n {
                let t = start + i;
                if t >= n {
                    break;
                }
                let frac = i as f64 / on_n as f64;
                let env = (PI * frac).sin().powi(2);
                let s = if self.kind == Kind::Noise {
                    resonator.step(rng.gen_range(-1.0..1.0)) * 0.35
                } else {
                    phase += 2.0 * PI * freq_at(frac) / sr;
                    phase.sin()
                };
                out[t] += amp * env * s;
            }
        }
        Waveform::new(out.into_iter().map(|x| x.clamp(-1.0, 1.0) as f32).collect(), SAMPLE_RATE)
    }
}

/// Two-pole band-pass filter.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, sr: f64) -> Self {
        let r = 0.98;
        let w = 2.0 * PI * freq / sr;
        Self {
            a1: 2.0 * r * w.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// One generated clip with its captions.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub audio_id: String,
    pub params: ClipParams,
    pub captions: Vec<String>,
}

/// Decides clip parameters and captions for a spec without rendering
/// audio. Each domain's attribute grid is shuffled and consumed without
/// replacement (reshuffled when exhausted), so captions stay distinct while
/// the grid lasts.
pub fn plan_corpus(spec: &SyntheticSpec) -> Result<Vec<SynthClip>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: f64 = spec.domains.iter().map(|(_, w)| w).sum();
    let mut pools: Vec<Vec<ClipParams>> = spec.domains.iter().map(|_| Vec::new()).collect();
    let mut clips = Vec::new();
    let mut lines = 0;
    while lines < spec.n_pairs {
        let mut pick = rng.gen_range(0.0..total);
        let mut d = 0;
        while d + 1 < spec.domains.len() && pick >= spec.domains[d].1 {
            pick -= spec.domains[d].1;
            d += 1;
        }
        if pools[d].is_empty() {
            pools[d] = ClipParams::grid(spec.domains[d].0);
            pools[d].shuffle(&mut rng);
        }
        let params = pools[d].pop().expect("refilled pool");
        let idx = clips.len();
        let mut captions = vec![params.caption()];
        lines += 1;
        if idx % ALT_CAPTION_PERIOD == ALT_CAPTION_PERIOD - 1 && lines < spec.n_pairs {
            captions.push(params.alt_caption());
            lines += 1;
        }
        clips.push(SynthClip {
            audio_id: format!("syn{idx:05}"),
            params,
            captions,
        });
    }
    Ok(clips)
}

fn clip_seed(seed: u64, idx: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (idx as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Writes `audio/<id>.wav` for every clip and a manifest with one line per
/// caption under `out_dir`. Returns the manifest path.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<std::path::PathBuf, SynthError> {
    let clips = plan_corpus(spec)?;
    fs::create_dir_all(out_dir.join("audio"))?;
    let manifest = out_dir.join(MANIFEST_NAME);
    let mut w = BufWriter::new(fs::File::create(&manifest)?);
    for (i, clip) in clips.iter().enumerate() {
        let wave = clip.params.render(&mut ChaCha8Rng::seed_from_u64(clip_seed(spec.seed, i)));
        let rel = format!("audio/{}.wav", clip.audio_id);
        write_wav(&out_dir.join(&rel), &wave)?;
        for caption in &clip.captions {
            let line = ManifestLine {
                audio_id: clip.audio_id.clone(),
                audio_path: rel.clone(),
                duration: clip.params.duration_secs(),
                source: SOURCE_NAME.into(),
                domain: clip.params.kind.domain(),
                caption: caption.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            std::io::Write::write_all(&mut w, b"\n")?;
        }
    }
    std::io::Write::flush(&mut w)?;
    Ok(manifest)
}
