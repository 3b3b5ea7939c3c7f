use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Init};
use super::data::load_split;
use super::evaluate::run_eval;
use super::pretrain::run_pretrain;
use super::ExperimentError;
use crate::corpus::sample_subsets;
use crate::eval::Pooling;
use crate::objectives::Objective;

pub const SWEEP_CSV: &str = "sweep.csv";
pub const THREADS_ENV: &str = "CAPLAB_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub objectives: Vec<Objective>,
    pub inits: Vec<Init>,
    pub task: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub objective: Objective,
    pub init: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Thread count from `CAPLAB_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Configuration of one sweep cell.
pub fn cell_config(base: &ExperimentConfig, objective: Objective, init: &Init, size: usize, seed: u64) -> ExperimentConfig {
    let mut c = base.clone();
    c.objective = objective;
    c.init = init.clone();
    c.data.subset_size = Some(size);
    c.data.seed = base.data.seed.wrapping_add(seed);
    c.train.seed = seed;
    c
}

/// Trains and evaluates every (objective, init, seed, size) cell on nested
/// subsets and writes a long-format CSV to `out_dir`.
pub fn run_scaling_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    out_dir: &Path,
    threads: Option<usize>,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut sizes = spec.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let split = load_split(&base.data)?;
    for &seed in &spec.seeds {
        let subsets = sample_subsets(&split.pool, &sizes, base.data.seed.wrapping_add(seed))?;
        for w in subsets.windows(2) {
            let small: BTreeSet<&str> = w[0].iter().map(|r| r.audio_id.as_str()).collect();
            let large: BTreeSet<&str> = w[1].iter().map(|r| r.audio_id.as_str()).collect();
            if !small.is_subset(&large) {
                return Err(ExperimentError::Data("subsets are not nested".into()));
            }
        }
    }
    let mut cells = Vec::new();
    for &objective in &spec.objectives {
        for init in &spec.inits {
            for &seed in &spec.seeds {
                for &size in &sizes {
                    cells.push((objective, init.clone(), seed, size));
                }
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    let run_cell = |(objective, init, seed, size): &(Objective, Init, u64, usize)| -> Result<SweepRow, ExperimentError> {
        let cfg = cell_config(base, *objective, init, *size, *seed);
        let dir = out_dir
            .join("cells")
            .join(format!("{}-{}-s{seed}-n{size}", objective.as_str(), init.label()));
        let pre = run_pretrain(&cfg, &dir)?;
        let report = run_eval(&pre.checkpoint, &cfg, &spec.task, Pooling::Mean)?;
        report.write(&dir.join(format!("eval-{}.json", spec.task)))?;
        Ok(SweepRow {
            size: *size,
            objective: *objective,
            init: init.label().into(),
            task: spec.task.clone(),
            metric: report.metric_name,
            value: report.value,
            seed: *seed,
            config_hash: report.config_hash,
        })
    };
    let n_threads = threads.or_else(threads_from_env).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n_threads)
        .build()
        .map_err(|e| ExperimentError::Data(format!("thread pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| cells.par_iter().map(run_cell).collect::<Result<_, _>>())?;
    write_sweep_csv(&out_dir.join(SWEEP_CSV), &rows)?;
    Ok(rows)
}

fn csv_error(e: csv::Error) -> ExperimentError {
    ExperimentError::Data(format!("sweep csv: {e}"))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>, ExperimentError> {
    csv::Reader::from_path(path)
        .map_err(csv_error)?
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

/// Mean metric per size for one (objective, init) series.
pub fn mean_by_size(rows: &[SweepRow], objective: Objective, init: &str) -> Vec<(usize, f64)> {
    let sizes: BTreeSet<usize> = rows.iter().map(|r| r.size).collect();
    sizes
        .into_iter()
        .filter_map(|s| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.size == s && r.objective == objective && r.init == init)
                .map(|r| r.value)
                .collect();
            (!v.is_empty()).then(|| (s, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}
