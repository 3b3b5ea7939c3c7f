use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DataConfig;
use super::ExperimentError;
use crate::audio::{log_mel, read_wav, resample, SAMPLE_RATE};
use crate::corpus::{consolidate, filter_corpus, ingest, read_blocklist, sample_subsets, CaptionRecord, Domain};
use crate::model::MIN_MEL_FRAMES;
use crate::objectives::Example;
use crate::tensor::Tensor;
use crate::tokenizer::BpeVocab;

/// Consolidated, filtered records split into a training pool and a
/// held-out evaluation set.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub pool: Vec<CaptionRecord>,
    pub eval: Vec<CaptionRecord>,
    pub skipped_lines: usize,
    pub dropped: usize,
}

pub fn load_split(cfg: &DataConfig) -> Result<CorpusSplit, ExperimentError> {
    let report = ingest(&cfg.manifest)?;
    let skipped_lines = report.skip_count();
    let records = consolidate(report.records)?;
    let blocklist = match &cfg.blocklist {
        Some(p) => read_blocklist(p)?,
        None => HashSet::new(),
    };
    let outcome = filter_corpus(records, cfg.max_duration, &blocklist);
    let dropped = outcome.dropped();
    let records = outcome.kept;
    if cfg.eval_size >= records.len() && cfg.eval_size > 0 {
        return Err(ExperimentError::Config(format!(
            "eval_size {} leaves no training records out of {}",
            cfg.eval_size,
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.holdout_seed));
    let held: HashSet<usize> = order[..cfg.eval_size].iter().copied().collect();
    let eval = order[..cfg.eval_size].iter().map(|&i| records[i].clone()).collect();
    let pool = records
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !held.contains(i))
        .map(|(_, r)| r)
        .collect();
    Ok(CorpusSplit {
        pool,
        eval,
        skipped_lines,
        dropped,
    })
}

/// Training records for this run: the configured nested subset of the pool.
pub fn training_records(split: &CorpusSplit, cfg: &DataConfig) -> Result<Vec<CaptionRecord>, ExperimentError> {
    match cfg.subset_size {
        None => Ok(split.pool.clone()),
        Some(n) => Ok(sample_subsets(&split.pool, &[n], cfg.seed)?.remove(0)),
    }
}

/// A clip with its features and tokenized captions.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub id: String,
    pub domain: Domain,
    pub mel: Tensor,
    pub captions: Vec<String>,
    pub tokens: Vec<Vec<u32>>,
}

impl PreparedClip {
    pub fn example(&self, caption: usize) -> Example {
        Example {
            id: self.id.clone(),
            mel: self.mel.clone(),
            valid: self.mel.rows(),
            tokens: self.tokens[caption].clone(),
        }
    }
}

pub fn resolve_audio(manifest: &Path, audio_path: &str) -> PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads audio and computes log-Mel features for every record.
pub fn prepare(records: &[CaptionRecord], manifest: &Path, vocab: &BpeVocab) -> Result<Vec<PreparedClip>, ExperimentError> {
    records
        .iter()
        .map(|r| {
            let mut wave = read_wav(&resolve_audio(manifest, &r.audio_path))?;
            if wave.sample_rate != SAMPLE_RATE {
                wave = resample(&wave, SAMPLE_RATE);
            }
            let mel = log_mel(&wave)?;
            if mel.n_frames() < MIN_MEL_FRAMES {
                return Err(ExperimentError::Data(format!("clip `{}` is shorter than {MIN_MEL_FRAMES} frames", r.audio_id)));
            }
            Ok(PreparedClip {
                id: r.audio_id.clone(),
                domain: r.domain,
                mel: mel.frames,
                captions: r.captions.clone(),
                tokens: r.captions.iter().map(|c| vocab.encode(c)).collect(),
            })
        })
        .collect()
}

pub fn train_vocab(records: &[CaptionRecord], target: usize) -> Result<BpeVocab, ExperimentError> {
    Ok(BpeVocab::train(records.iter().flat_map(|r| r.captions.iter().map(String::as_str)), target)?)
}

/// Batch composition for one step: distinct clips and one caption each.
/// A pure function of `(seed, step)`, so resumed runs replay it exactly.
pub fn batch_for_step(clips: &[PreparedClip], batch: usize, seed: u64, step: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0xA076_1D64_78BD_642F).rotate_left(17));
    let k = batch.min(clips.len());
    index::sample(&mut rng, clips.len(), k)
        .into_iter()
        .map(|i| {
            let c = &clips[i];
            let cap = rng.gen_range(0..c.tokens.len());
            c.example(cap)
        })
        .collect()
}

/// First caption of every clip, in order.
pub fn first_caption_examples(clips: &[PreparedClip]) -> Vec<Example> {
    clips.iter().map(|c| c.example(0)).collect()
}
