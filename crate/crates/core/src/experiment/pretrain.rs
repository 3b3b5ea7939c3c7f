use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Init};
use super::data::{batch_for_step, load_split, prepare, train_vocab, training_records};
use super::ExperimentError;
use crate::eval::is_audio_param;
use crate::model::{AudioLanguageModel, Towers};
use crate::objectives::{Objective, TrainConfig, Trainer};
use crate::tensor::{load_tensors, Adam, AdamState, Tensor};
use crate::tokenizer::BpeVocab;

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LOG_NAME: &str = "train_log.jsonl";
pub const VOCAB_NAME: &str = "vocab.bpe";
pub const CONFIG_NAME: &str = "experiment.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub objective: Objective,
    pub loss: f64,
    pub tau: Option<f64>,
    pub lr: f32,
    pub tokens_or_pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub resumed_from: Option<u64>,
    pub config_hash: String,
    pub final_loss: Option<f64>,
}

pub fn towers_for(objective: Objective) -> Towers {
    match objective {
        Objective::Contrastive => Towers::CONTRASTIVE,
        Objective::Captioning => Towers::CAPTIONING,
    }
}

fn opt_tensors(opt: &AdamState) -> Vec<(String, Tensor)> {
    let mut out = vec![("opt/step".to_string(), Tensor::scalar(opt.step as f32))];
    out.extend(opt.m.iter().map(|(k, t)| (format!("opt/m/{k}"), t.clone())));
    out.extend(opt.v.iter().map(|(k, t)| (format!("opt/v/{k}"), t.clone())));
    out
}

fn restore_opt(tensors: &[(String, Tensor)]) -> Result<AdamState, ExperimentError> {
    let mut opt = AdamState::default();
    let mut have_step = false;
    for (name, t) in tensors {
        if name == "opt/step" {
            opt.step = t.data()[0] as u64;
            have_step = true;
        } else if let Some(k) = name.strip_prefix("opt/m/") {
            opt.m.insert(k.to_string(), t.clone());
        } else if let Some(k) = name.strip_prefix("opt/v/") {
            opt.v.insert(k.to_string(), t.clone());
        }
    }
    if !have_step {
        return Err(ExperimentError::Data("checkpoint has no optimizer state to resume from".into()));
    }
    Ok(opt)
}

/// Keeps log entries up to and including `step`.
fn truncate_log(path: &Path, step: u64) -> Result<(), ExperimentError> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let entry: LogEntry = serde_json::from_str(&line)?;
        if entry.step <= step {
            kept.push(line);
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, ExperimentError> {
    BufReader::new(File::open(path)?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Trains one model into `run_dir`. A checkpoint already present there is
/// resumed; batch order depends only on `(seed, step)`, so a resumed run
/// continues exactly as an uninterrupted one would.
pub fn run_pretrain(cfg: &ExperimentConfig, run_dir: &Path) -> Result<PretrainOutcome, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join(CONFIG_NAME), serde_json::to_string_pretty(cfg)?)?;
    let split = load_split(&cfg.data)?;
    let records = training_records(&split, &cfg.data)?;
    let vocab_path = run_dir.join(VOCAB_NAME);
    let vocab = if vocab_path.exists() {
        BpeVocab::load(&vocab_path)?
    } else {
        let v = train_vocab(&records, cfg.model.vocab_size)?;
        v.save(&vocab_path)?;
        v
    };
    let clips = prepare(&records, &cfg.data.manifest, &vocab)?;

    let ckpt = run_dir.join(CHECKPOINT_NAME);
    let log_path = run_dir.join(LOG_NAME);
    let (model, opt, resumed_from) = if ckpt.exists() {
        let model = AudioLanguageModel::from_checkpoint(&ckpt)?;
        let opt = restore_opt(&load_tensors(&ckpt)?)?;
        truncate_log(&log_path, opt.step)?;
        let s = opt.step;
        (model, opt, Some(s))
    } else {
        let mc = cfg.model.model_config(vocab.vocab_size());
        let mut model = AudioLanguageModel::new(mc, towers_for(cfg.objective), cfg.train.seed)?;
        if let Init::Checkpoint(p) = &cfg.init {
            model.load_params(p, is_audio_param)?;
        }
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
        (model, AdamState::default(), None)
    };

    let mut tc = TrainConfig::new(cfg.objective);
    tc.adam = Adam::with_lr(cfg.train.lr);
    tc.warmup_steps = cfg.train.warmup_steps;
    tc.parallel_fraction = cfg.train.parallel_fraction;
    tc.seed = cfg.train.seed;
    let mut trainer = Trainer::new(model, tc);
    trainer.opt = opt;

    let save = |trainer: &Trainer| -> Result<(), ExperimentError> {
        let extra = opt_tensors(&trainer.opt);
        trainer.model.save_with(&ckpt, extra.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(())
    };

    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    let mut final_loss = None;
    while trainer.step() < cfg.train.steps {
        let batch = batch_for_step(&clips, cfg.train.batch, cfg.train.seed, trainer.step());
        let out = trainer.train_step(&batch)?;
        let entry = LogEntry {
            step: trainer.step(),
            objective: cfg.objective,
            loss: out.loss,
            tau: out.tau,
            lr: out.lr,
            tokens_or_pairs: out.weight,
        };
        serde_json::to_writer(&mut log, &entry)?;
        log.write_all(b"\n")?;
        final_loss = Some(out.loss);
        let every = cfg.train.checkpoint_every.max(1);
        if trainer.step() % every == 0 || trainer.step() == cfg.train.steps {
            log.flush()?;
            save(&trainer)?;
        }
    }
    log.flush()?;
    if !ckpt.exists() {
        save(&trainer)?;
    }
    Ok(PretrainOutcome {
        checkpoint: ckpt,
        log: log_path,
        steps: trainer.step(),
        resumed_from,
        config_hash: cfg.hash(),
        final_loss,
    })
}
