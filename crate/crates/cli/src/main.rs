use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use caplab::corpus::{self, CorpusError};
use caplab::eval::Pooling;
use caplab::experiment::{self, ExperimentConfig, ExperimentError, Init, SweepSpec};
use caplab::objectives::Objective;
use caplab::synth::{gen_synthetic_corpus, SyntheticSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "caplab", version, about = "Audio-language pretraining lab")]
struct Cli {
    /// JSON object of flag values; keys are long flag names. Command-line
    /// flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print errors to stderr as a JSON object.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build, summarize or subsample caption manifests.
    Corpus {
        #[command(subcommand)]
        action: CorpusCmd,
    },
    /// Generate a synthetic corpus (WAV files plus manifest).
    GenSynth {
        #[arg(long)]
        n_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Pretrain a model; resumes when the run directory has a checkpoint.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Evaluate a checkpoint on one task and write a JSON report.
    Eval {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "retrieval")]
        task: String,
        #[arg(long, value_enum, default_value = "mean")]
        pooling: PoolingArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over nested subsets; writes a long-format CSV.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 64, 256])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', value_enum, default_values_t = [ObjectiveArg::Contrastive])]
        objectives: Vec<ObjectiveArg>,
        /// `scratch` or a checkpoint path; comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = ["scratch".to_string()])]
        inits: Vec<String>,
        #[arg(long, default_value = "retrieval")]
        task: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Parallel cells; defaults to CAPLAB_THREADS or the core count.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Render Markdown tables and SVG curves from a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    /// Consolidate and filter a manifest.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        max_duration: f64,
        #[arg(long)]
        blocklist: Option<PathBuf>,
    },
    /// Lexical statistics of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Nested random subsets, one manifest per size.
    Subset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Experiment configuration JSON.
    #[arg(long)]
    experiment: Option<PathBuf>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    parallel_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Contrastive,
    Captioning,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Contrastive => Objective::Contrastive,
            ObjectiveArg::Captioning => Objective::Captioning,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    Mean,
    Mhap,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{}: file not found", path.display())))
    }
}

fn ingest(manifest: &Path) -> Result<corpus::IngestReport, Failure> {
    require_file(manifest)?;
    Ok(corpus::ingest(manifest)?)
}

fn experiment_config(a: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    if let Some(p) = &a.experiment {
        require_file(p)?;
    }
    let mut cfg = match (&a.experiment, &a.manifest, a.objective) {
        (Some(p), _, _) => ExperimentConfig::load(p)?,
        (None, Some(m), Some(o)) => ExperimentConfig::new(o.into(), m),
        (None, Some(m), None) => ExperimentConfig::new(Objective::Contrastive, m),
        (None, None, _) => return Err(Failure::Validation("either --experiment or --manifest is required".into())),
    };
    if let Some(o) = a.objective {
        cfg.objective = o.into();
    }
    if let Some(m) = &a.manifest {
        cfg.data.manifest = m.clone();
    }
    if let Some(p) = &a.init_checkpoint {
        cfg.init = Init::Checkpoint(p.clone());
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = a.parallel_fraction {
        cfg.train.parallel_fraction = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.subset_size {
        cfg.data.subset_size = Some(v);
    }
    if let Some(v) = a.eval_size {
        cfg.data.eval_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_corpus(cmd: CorpusCmd) -> Result<(), Failure> {
    match cmd {
        CorpusCmd::Build {
            manifest,
            out,
            max_duration,
            blocklist,
        } => {
            if !(max_duration > 0.0) {
                return Err(Failure::Validation("--max-duration must be positive".into()));
            }
            let report = ingest(&manifest)?;
            let skipped = report.skip_count();
            let records = corpus::consolidate(report.records)?;
            let block = match blocklist {
                Some(p) => corpus::read_blocklist(&p)?,
                None => HashSet::new(),
            };
            let outcome = corpus::filter_corpus(records, max_duration, &block);
            let f = File::create(&out).map_err(runtime)?;
            corpus::write_manifest(BufWriter::new(f), &outcome.kept)?;
            print_json(&json!({
                "records": outcome.kept.len(),
                "pairs": corpus::n_pairs(&outcome.kept),
                "skipped_lines": skipped,
                "dropped_duration": outcome.dropped_duration,
                "dropped_overlap": outcome.dropped_overlap,
                "out": out,
            }));
        }
        CorpusCmd::Stats { manifest } => {
            let records = corpus::consolidate(ingest(&manifest)?.records)?;
            let stats = corpus::lexical_stats(&records)?;
            print_json(&serde_json::to_value(stats).map_err(runtime)?);
        }
        CorpusCmd::Subset {
            manifest,
            sizes,
            seed,
            out_dir,
        } => {
            let records = corpus::consolidate(ingest(&manifest)?.records)?;
            let subsets = corpus::sample_subsets(&records, &sizes, seed)?;
            std::fs::create_dir_all(&out_dir).map_err(runtime)?;
            let mut written = Vec::new();
            for (size, subset) in sizes.iter().zip(&subsets) {
                let path = out_dir.join(format!("subset_{size}.jsonl"));
                let f = File::create(&path).map_err(runtime)?;
                corpus::write_manifest(BufWriter::new(f), subset)?;
                written.push(path);
            }
            print_json(&json!({ "subsets": written }));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Corpus { action } => run_corpus(action),
        Command::GenSynth { n_pairs, seed, out_dir } => {
            let manifest = gen_synthetic_corpus(&SyntheticSpec::new(n_pairs, seed), &out_dir).map_err(|e| match e {
                caplab::synth::SynthError::Spec(m) => Failure::Validation(m),
                other => runtime(other),
            })?;
            print_json(&json!({ "manifest": manifest }));
            Ok(())
        }
        Command::Train { exp, run_dir } => {
            let cfg = experiment_config(&exp)?;
            let out = experiment::run_pretrain(&cfg, &run_dir)?;
            print_json(&json!({
                "checkpoint": out.checkpoint,
                "log": out.log,
                "steps": out.steps,
                "resumed_from": out.resumed_from,
                "final_loss": out.final_loss,
                "config_hash": out.config_hash,
            }));
            Ok(())
        }
        Command::Eval {
            exp,
            checkpoint,
            task,
            pooling,
            out,
        } => {
            let cfg = experiment_config(&exp)?;
            require_file(&checkpoint)?;
            if !experiment::TASKS.contains(&task.as_str()) {
                return Err(Failure::Validation(format!("unknown task `{task}`; expected one of {:?}", experiment::TASKS)));
            }
            let pooling = match pooling {
                PoolingArg::Mean => Pooling::Mean,
                PoolingArg::Mhap => Pooling::Mhap,
            };
            let report = experiment::run_eval(&checkpoint, &cfg, &task, pooling)?;
            let out = out.unwrap_or_else(|| checkpoint.with_file_name(format!("eval-{task}-{}.json", pooling.as_str())));
            report.write(&out).map_err(runtime)?;
            print_json(&serde_json::to_value(&report).map_err(runtime)?);
            Ok(())
        }
        Command::Sweep {
            exp,
            sizes,
            seeds,
            objectives,
            inits,
            task,
            out_dir,
            threads,
        } => {
            let cfg = experiment_config(&exp)?;
            let spec = SweepSpec {
                sizes,
                seeds,
                objectives: objectives.into_iter().map(Objective::from).collect(),
                inits: inits
                    .into_iter()
                    .map(|s| if s == "scratch" { Init::Scratch } else { Init::Checkpoint(s.into()) })
                    .collect(),
                task,
            };
            let rows = experiment::run_scaling_sweep(&cfg, &spec, &out_dir, threads)?;
            print_json(&json!({ "cells": rows.len(), "csv": out_dir.join(experiment::SWEEP_CSV) }));
            Ok(())
        }
        Command::Report { run_dir } => {
            let out = experiment::report(&run_dir)?;
            print_json(&json!({
                "reports": out.n_reports,
                "markdown": run_dir.join(experiment::REPORT_MD),
                "svg": out.svg.as_ref().map(|_| run_dir.join(experiment::SCALING_SVG)),
                "missing": out.missing,
            }));
            Ok(())
        }
    }
}

/// Splices flag values from a `--config` JSON object into the argument
/// list, ahead of the explicit flags so that those win.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, Failure> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => args
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| Failure::Validation("--config needs a path".into()))?,
    };
    let text = std::fs::read_to_string(Path::new(&path)).map_err(|e| Failure::Validation(format!("{path}: {e}")))?;
    let obj: serde_json::Map<String, Value> =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{path}: {e}")))?;
    let present: HashSet<&str> = args
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();
    let mut extra = Vec::new();
    for (key, value) in &obj {
        let flag = key.replace('_', "-");
        if present.contains(flag.as_str()) || flag == "config" {
            continue;
        }
        match value {
            Value::Bool(true) => extra.push(format!("--{flag}")),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let joined: Vec<String> = items.iter().map(scalar_text).collect();
                extra.push(format!("--{flag}={}", joined.join(",")));
            }
            other => extra.push(format!("--{flag}={}", scalar_text(other))),
        }
    }
    let mut out: Vec<String> = args.into_iter().collect();
    out.extend(extra);
    Ok(out)
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn report_failure(f: &Failure, json_errors: bool) {
    let (kind, msg) = match f {
        Failure::Validation(m) => ("validation", m),
        Failure::Runtime(m) => ("runtime", m),
    };
    if json_errors {
        eprintln!("{}", json!({ "error": msg, "kind": kind, "exit_code": f.code() }));
    } else {
        eprintln!("error: {msg}");
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let json_errors = raw.iter().any(|a| a == "--json-errors");
    let args = match expand_config(raw) {
        Ok(a) => a,
        Err(f) => {
            report_failure(&f, json_errors);
            return ExitCode::from(f.code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                report_failure(&Failure::Validation(e.to_string().trim().to_string()), true);
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    let json_errors = cli.json_errors;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report_failure(&f, json_errors);
            ExitCode::from(f.code())
        }
    }
}
