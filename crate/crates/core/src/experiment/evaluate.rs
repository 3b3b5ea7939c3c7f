use std::path::Path;

use super::config::ExperimentConfig;
use super::data::{first_caption_examples, load_split, prepare, training_records, PreparedClip};
use super::pretrain::VOCAB_NAME;
use super::ExperimentError;
use crate::corpus::{words, Domain};
use crate::eval::{
    caption_rouge, encode_example, retrieval_recall_at_1, run_alignment, train_probe, AlignConfig, AlignMode, EvalReport,
    LabelKind, Pooling, ProbeConfig, ProbeMetric, ProbeTask,
};
use crate::model::{AudioLanguageModel, FrameEmbeddings};
use crate::tokenizer::BpeVocab;

pub const TASKS: [&str; 4] = ["retrieval", "captioning", "domain", "keywords"];

/// Caption words used as multi-label tags by the `keywords` probe.
pub const KEYWORDS: [&str; 12] = [
    "low", "mid", "high", "loud", "quiet", "beep", "noise", "voice", "melody", "rising", "falling", "fast",
];

fn keyword_labels(clip: &PreparedClip) -> Vec<usize> {
    let present: std::collections::HashSet<String> = clip.captions.iter().flat_map(|c| words(c)).collect();
    KEYWORDS
        .iter()
        .enumerate()
        .filter(|(_, k)| present.contains(**k))
        .map(|(i, _)| i)
        .collect()
}

fn frames(model: &AudioLanguageModel, clips: &[PreparedClip]) -> Result<Vec<FrameEmbeddings>, ExperimentError> {
    clips
        .iter()
        .map(|c| Ok(encode_example(model, &c.example(0))?))
        .collect()
}

/// Loads the vocabulary stored next to a checkpoint.
pub fn vocab_for(checkpoint: &Path) -> Result<BpeVocab, ExperimentError> {
    Ok(BpeVocab::load(&checkpoint.with_file_name(VOCAB_NAME))?)
}

/// Evaluates a checkpoint on one task over the held-out split of `cfg`.
/// Retrieval and captioning use the checkpoint's own text towers when
/// present and otherwise align a new text side against the frozen audio
/// encoder first.
pub fn run_eval(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    task: &str,
    pooling: Pooling,
) -> Result<EvalReport, ExperimentError> {
    let mut model = AudioLanguageModel::from_checkpoint(checkpoint)?;
    let vocab = vocab_for(checkpoint)?;
    let split = load_split(&cfg.data)?;
    if split.eval.is_empty() {
        return Err(ExperimentError::Config("evaluation needs data.eval_size > 0".into()));
    }
    let eval_clips = prepare(&split.eval, &cfg.data.manifest, &vocab)?;
    let train_clips = || -> Result<Vec<PreparedClip>, ExperimentError> {
        prepare(&training_records(&split, &cfg.data)?, &cfg.data.manifest, &vocab)
    };
    let align = AlignConfig {
        steps: cfg.eval.align_steps,
        lr: cfg.train.lr,
        batch: cfg.train.batch,
        seed: cfg.train.seed,
        ..AlignConfig::default()
    };
    let towers = model.towers();
    let (metric_name, value, pooling_name) = match task {
        "retrieval" => {
            let eval = first_caption_examples(&eval_clips);
            let v = if towers.text_encoder {
                retrieval_recall_at_1(&model, &eval)?
            } else {
                let train = first_caption_examples(&train_clips()?);
                run_alignment(&mut model, &train, &eval, AlignMode::Retrieval, &align, &vocab)?.value
            };
            ("recall@1".to_string(), v, Pooling::Mean.as_str())
        }
        "captioning" => {
            let eval = first_caption_examples(&eval_clips);
            let v = if towers.decoder {
                caption_rouge(&model, &vocab, &eval, align.max_caption_len)?
            } else {
                let train = first_caption_examples(&train_clips()?);
                run_alignment(&mut model, &train, &eval, AlignMode::Captioning, &align, &vocab)?.value
            };
            ("rougeL".to_string(), v, "none")
        }
        "domain" | "keywords" => {
            let train = train_clips()?;
            let (kind, n_classes, metric) = if task == "domain" {
                (LabelKind::SingleLabel, Domain::ALL.len(), ProbeMetric::Accuracy)
            } else {
                (LabelKind::MultiLabel, KEYWORDS.len(), ProbeMetric::Map)
            };
            let labels = |clips: &[PreparedClip]| -> Vec<Vec<usize>> {
                clips
                    .iter()
                    .map(|c| if task == "domain" { vec![c.domain.index()] } else { keyword_labels(c) })
                    .collect()
            };
            let probe_task = ProbeTask {
                kind,
                n_classes,
                metric,
                pooling,
            };
            let probe_cfg = ProbeConfig {
                epochs: cfg.eval.probe_epochs,
                seed: cfg.train.seed,
                ..ProbeConfig::default()
            };
            let (_, r) = train_probe(
                &frames(&model, &train)?,
                &labels(&train),
                &frames(&model, &eval_clips)?,
                &labels(&eval_clips),
                &probe_task,
                &probe_cfg,
            )?;
            (r.metric_name, r.value, pooling.as_str())
        }
        other => return Err(ExperimentError::Config(format!("unknown task `{other}`; expected one of {TASKS:?}"))),
    };
    Ok(EvalReport {
        checkpoint: checkpoint.display().to_string(),
        task: task.to_string(),
        pooling: pooling_name.to_string(),
        metric_name,
        value,
        n_eval: eval_clips.len(),
        config_hash: cfg.hash(),
    })
}
