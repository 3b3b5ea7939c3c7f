use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::pretrain::CONFIG_NAME;
use super::sweep::{mean_by_size, read_sweep_csv, SweepRow, SWEEP_CSV};
use super::ExperimentError;
use crate::eval::EvalReport;

pub const REPORT_MD: &str = "report.md";
pub const SCALING_SVG: &str = "scaling.svg";
pub const NO_RESULTS: &str = "_no results_";

/// Fixed-precision rendering shared by tables and traceability checks.
pub fn fmt_value(v: f64) -> String {
    format!("{v:.4}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutcome {
    pub markdown: String,
    pub svg: Option<String>,
    /// Artifacts that could not be read.
    pub missing: Vec<String>,
    pub n_reports: usize,
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_json(&p, out)?;
        } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("eval") && n.ends_with(".json")) {
            out.push(p);
        }
    }
    Ok(())
}

fn variant_label(report: &EvalReport) -> String {
    let cfg_path = Path::new(&report.checkpoint).with_file_name(CONFIG_NAME);
    let variant = fs::read_to_string(&cfg_path)
        .ok()
        .and_then(|t| serde_json::from_str::<ExperimentConfig>(&t).ok())
        .map(|c| {
            let obj = c.objective.as_str();
            let mut name = obj[..1].to_uppercase();
            name.push_str(&obj[1..]);
            format!("{name}-{}", c.init.label())
        })
        .unwrap_or_else(|| report.checkpoint.clone());
    format!("{variant} `{}`", report.config_hash)
}

fn results_table(reports: &[EvalReport]) -> String {
    let columns: BTreeSet<String> = reports.iter().map(|r| format!("{} ({}, {})", r.task, r.metric_name, r.pooling)).collect();
    let mut rows: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in reports {
        rows.entry(variant_label(r))
            .or_default()
            .insert(format!("{} ({}, {})", r.task, r.metric_name, r.pooling), r.value);
    }
    let mut s = String::from("| method |");
    for c in &columns {
        let _ = write!(s, " {c} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(columns.len()));
    s.push('\n');
    for (label, cells) in rows {
        let _ = write!(s, "| {label} |");
        for c in &columns {
            match cells.get(c) {
                Some(v) => {
                    let _ = write!(s, " {} |", fmt_value(*v));
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

fn series(rows: &[SweepRow]) -> Vec<(String, Vec<(usize, f64)>)> {
    let keys: BTreeSet<(String, String)> = rows.iter().map(|r| (r.objective.as_str().to_string(), r.init.clone())).collect();
    keys.into_iter()
        .filter_map(|(obj, init)| {
            let o = rows.iter().find(|r| r.objective.as_str() == obj)?.objective;
            Some((format!("{obj}-{init}"), mean_by_size(rows, o, &init)))
        })
        .collect()
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("| series | size | mean value | runs |\n|---|---|---|---|\n");
    for (name, points) in series(rows) {
        for (size, mean) in points {
            let n = rows
                .iter()
                .filter(|r| r.size == size && format!("{}-{}", r.objective.as_str(), r.init) == name)
                .count();
            let _ = writeln!(s, "| {name} | {size} | {} | {n} |", fmt_value(mean));
        }
    }
    s
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Metric against log pair count, one polyline per series.
pub fn scaling_svg(rows: &[SweepRow]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let all = series(rows);
    let xs: Vec<f64> = rows.iter().map(|r| (r.size.max(1) as f64).log2()).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 1.0, x0 + 1.0) };
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\" font-size=\"12\">training pairs (log scale)</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ly = h - 12.0
    );
    let sizes: BTreeSet<usize> = rows.iter().map(|r| r.size).collect();
    for size in sizes {
        let x = px((size.max(1) as f64).log2());
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{size}</text>",
            h - pad + 16.0
        );
    }
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{t:.1}</text>",
            pad - 6.0,
            py(t) + 4.0
        );
    }
    for (i, (name, points)) in all.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = points
            .iter()
            .map(|&(size, v)| format!("{:.1},{:.1}", px((size.max(1) as f64).log2()), py(v)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point");
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"{color}\">{name}</text>",
            w - pad - 140.0,
            pad + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Builds `report.md` (and `scaling.svg` when a sweep is present) from the
/// artifacts under `run_dir`. Unreadable artifacts are listed and skipped.
pub fn report(run_dir: &Path) -> Result<ReportOutcome, ExperimentError> {
    let mut files = Vec::new();
    if run_dir.is_dir() {
        collect_json(run_dir, &mut files)?;
    }
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    for f in files {
        match EvalReport::read(&f) {
            Ok(r) => reports.push(r),
            Err(e) => missing.push(format!("{}: {e}", f.display())),
        }
    }
    let csv = run_dir.join(SWEEP_CSV);
    let sweep = if csv.exists() {
        match read_sweep_csv(&csv) {
            Ok(rows) => rows,
            Err(e) => {
                missing.push(format!("{}: {e}", csv.display()));
                Vec::new()
            }
        }
    } else {
        Vec::new()
    };

    let mut md = String::from("# Results\n\n");
    if reports.is_empty() && sweep.is_empty() {
        md.push_str(NO_RESULTS);
        md.push('\n');
    }
    if !reports.is_empty() {
        md.push_str("## Evaluations\n\n");
        md.push_str(&results_table(&reports));
        md.push('\n');
    }
    let svg = (!sweep.is_empty()).then(|| scaling_svg(&sweep));
    if !sweep.is_empty() {
        md.push_str("## Scaling sweep\n\n");
        md.push_str(&sweep_table(&sweep));
        let hashes: BTreeSet<&str> = sweep.iter().map(|r| r.config_hash.as_str()).collect();
        let _ = writeln!(md, "\nConfig hashes: {}\n", hashes.into_iter().collect::<Vec<_>>().join(", "));
        let _ = writeln!(md, "![scaling]({SCALING_SVG})");
    }
    if !missing.is_empty() {
        md.push_str("\n## Unreadable artifacts\n\n");
        for m in &missing {
            let _ = writeln!(md, "- {m}");
        }
    }
    if run_dir.is_dir() {
        fs::write(run_dir.join(REPORT_MD), &md)?;
        if let Some(svg) = &svg {
            fs::write(run_dir.join(SCALING_SVG), svg)?;
        }
    }
    Ok(ReportOutcome {
        markdown: md,
        svg,
        missing,
        n_reports: reports.len(),
    })
}
