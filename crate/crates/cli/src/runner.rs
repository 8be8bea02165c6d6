//! Run-matrix execution and CSV output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mixmask_core::harness::{self, EpisodeRecord, LayerDelta, SimilarityDeltas, TrainingStats};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Variant};
use crate::plot::{self, FigureKind};
use crate::{CliError, Result};

pub const SCHEMA: &str = "#schema=1";

pub const RUN_COLUMNS: [&str; 14] = [
    "episode",
    "seed",
    "train_return",
    "steps",
    "eval_return",
    "j_pi",
    "j_v",
    "entropy",
    "mix_penalty",
    "mask_penalty",
    "alpha_s",
    "alpha_d",
    "epsilon",
    "solved",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub variant: String,
    pub seed: u64,
    pub path: PathBuf,
    pub episodes: usize,
    pub solved_at: Option<usize>,
    pub final_eval: Option<f64>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub dir: PathBuf,
    pub outcomes: Vec<RunOutcome>,
}

impl Report {
    pub fn aborted(&self) -> usize {
        self.outcomes.iter().filter(|o| o.aborted.is_some()).count()
    }

    /// Final evaluation returns of one variant, in seed order.
    pub fn finals(&self, variant: &str) -> Vec<f64> {
        self.outcomes.iter().filter(|o| o.variant == variant).filter_map(|o| o.final_eval).collect()
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record_row(seed: u64, r: &EpisodeRecord) -> Vec<String> {
    vec![
        r.episode.to_string(),
        seed.to_string(),
        r.train_return.to_string(),
        r.steps.to_string(),
        opt(r.eval_return),
        r.j_pi.to_string(),
        r.j_v.to_string(),
        r.entropy.to_string(),
        opt(r.mix_penalty),
        opt(r.mask_penalty),
        r.alpha_s.to_string(),
        r.alpha_d.to_string(),
        r.epsilon.to_string(),
        r.solved.to_string(),
    ]
}

/// Writes one run's CSV: metadata comments, header, one row per episode, and
/// a trailing abort marker when the run stopped on a non-finite value.
pub fn write_run_csv(path: &Path, variant: &str, stats: &TrainingStats) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{SCHEMA}").unwrap();
    writeln!(buf, "#variant={variant}").unwrap();
    writeln!(buf, "#seed={}", stats.seed).unwrap();
    writeln!(buf, "#config_hash={}", stats.config_hash).unwrap();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |e| CliError::Csv(path.to_path_buf(), e);
        w.write_record(RUN_COLUMNS).map_err(csv_err)?;
        for r in &stats.records {
            w.write_record(record_row(stats.seed, r)).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    }
    if let Some(reason) = &stats.aborted {
        writeln!(buf, "#aborted={reason}").unwrap();
    }
    io(path, fs::write(path, buf))
}

/// A run CSV read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub variant: String,
    pub seed: u64,
    pub aborted: Option<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RunFile {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_run_csv(path: &Path) -> Result<RunFile> {
    let text = io(path, fs::read_to_string(path))?;
    let meta = |key: &str| {
        text.lines()
            .filter_map(|l| l.strip_prefix('#'))
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
    };
    let name = path.display().to_string();
    if !text.starts_with(SCHEMA) {
        return Err(CliError::Schema(name, "schema".into()));
    }
    let variant = meta("variant").ok_or_else(|| CliError::Schema(name.clone(), "variant".into()))?;
    let seed = meta("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::Schema(name.clone(), "seed".into()))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let csv_err = |e| CliError::Csv(path.to_path_buf(), e);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(csv_err)?;
    Ok(RunFile {
        variant,
        seed,
        aborted: meta("aborted"),
        header,
        rows,
    })
}

/// Builds `summary.csv` from exactly the run files present in `runs_dir`, in file-name order.
pub fn write_summary(runs_dir: &Path, summary: &Path) -> Result<usize> {
    let mut paths: Vec<PathBuf> = io(runs_dir, fs::read_dir(runs_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut buf = Vec::new();
    writeln!(buf, "{SCHEMA}").unwrap();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |e| CliError::Csv(summary.to_path_buf(), e);
        w.write_record(["variant", "seed", "episode", "train_return", "eval_return", "solved", "aborted"])
            .map_err(csv_err)?;
        for p in &paths {
            let f = read_run_csv(p)?;
            let col = |n: &str| f.column(n).ok_or_else(|| CliError::Schema(p.display().to_string(), n.into()));
            let (ep, tr, ev, so) = (col("episode")?, col("train_return")?, col("eval_return")?, col("solved")?);
            let aborted = f.aborted.is_some().to_string();
            for row in &f.rows {
                w.write_record([&f.variant, &f.seed.to_string(), &row[ep], &row[tr], &row[ev], &row[so], &aborted])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| CliError::Io(summary.to_path_buf(), e))?;
    }
    io(summary, fs::write(summary, buf))?;
    Ok(paths.len())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Field("workers".into(), e.to_string()))
}

/// Executes every (variant, seed) run, then writes the summary, run table and plots.
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<Report> {
    cfg.validate()?;
    let variants = cfg.variants();
    let runs_dir = dir.join("runs");
    if runs_dir.exists() {
        io(&runs_dir, fs::remove_dir_all(&runs_dir))?;
    }
    io(&runs_dir, fs::create_dir_all(&runs_dir))?;
    let jobs: Vec<(&Variant, u64)> = variants.iter().flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let outcomes = pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(v, seed)| {
                let stats = harness::train(&v.run, seed).map_err(|e| CliError::Variant(v.label.clone(), e))?;
                if let Some(reason) = &stats.aborted {
                    log::error!("{} seed {seed} aborted: {reason}", v.label);
                }
                let path = runs_dir.join(format!("{}__seed{seed}.csv", v.slug()));
                write_run_csv(&path, &v.label, &stats)?;
                log::info!("{} seed {seed}: {} episodes, final eval {:?}", v.label, stats.records.len(), stats.final_eval);
                Ok(RunOutcome {
                    variant: v.label.clone(),
                    seed,
                    path,
                    episodes: stats.records.len(),
                    solved_at: stats.solved_at,
                    final_eval: stats.final_eval,
                    aborted: stats.aborted.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = Report {
        dir: dir.to_path_buf(),
        outcomes,
    };
    let summary = dir.join("summary.csv");
    write_summary(&runs_dir, &summary)?;
    write_run_table(&report, &dir.join("runs.csv"))?;
    let text = io(&summary, fs::read_to_string(&summary))?;
    let plots = dir.join("plots");
    io(&plots, fs::create_dir_all(&plots))?;
    for kind in [FigureKind::Eval, FigureKind::Train] {
        let svg = plot::render(&text, kind)?;
        let path = plots.join(format!("{}.svg", kind.name()));
        io(&path, fs::write(&path, svg))?;
    }
    Ok(report)
}

fn write_run_table(report: &Report, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Csv(path.to_path_buf(), e))?;
    let csv_err = |e| CliError::Csv(path.to_path_buf(), e);
    w.write_record(["variant", "seed", "episodes", "solved_at", "final_eval", "aborted"]).map_err(csv_err)?;
    for o in &report.outcomes {
        w.write_record([
            o.variant.clone(),
            o.seed.to_string(),
            o.episodes.to_string(),
            o.solved_at.map(|e| e.to_string()).unwrap_or_default(),
            opt(o.final_eval),
            o.aborted.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Linear-interpolation quantile of a sample; `NaN` when empty.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

pub fn iqr(xs: &[f64]) -> f64 {
    quantile(xs, 0.75) - quantile(xs, 0.25)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub arch: String,
    pub median: f64,
    pub iqr: f64,
    pub solved: usize,
    pub seeds: usize,
    pub best: bool,
}

/// Per-variant median final evaluation; `best` marks the top variant of each architecture.
pub fn sweep_table(cfg: &ExperimentConfig, report: &Report) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = cfg
        .variants()
        .iter()
        .map(|v| {
            let finals = report.finals(&v.label);
            SweepRow {
                variant: v.label.clone(),
                arch: crate::config::enum_name(&v.run.architecture.arch),
                median: median(&finals),
                iqr: iqr(&finals),
                solved: report.outcomes.iter().filter(|o| o.variant == v.label && o.solved_at.is_some()).count(),
                seeds: finals.len(),
                best: false,
            }
        })
        .collect();
    let archs: Vec<String> = rows.iter().map(|r| r.arch.clone()).collect();
    for arch in archs {
        if let Some(i) = (0..rows.len())
            .filter(|&i| rows[i].arch == arch && !rows[i].median.is_nan())
            .max_by(|&a, &b| rows[a].median.total_cmp(&rows[b].median).then(b.cmp(&a)))
        {
            rows[i].best = true;
        }
    }
    rows
}

pub fn write_sweep_table(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Csv(path.to_path_buf(), e))?;
    let csv_err = |e| CliError::Csv(path.to_path_buf(), e);
    w.write_record(["variant", "arch", "median_final_eval", "iqr", "solved", "seeds", "best"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.arch.clone(),
            r.median.to_string(),
            r.iqr.to_string(),
            r.solved.to_string(),
            r.seeds.to_string(),
            r.best.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Per-layer similarity deltas for every variant, one model seed per job.
pub fn similarity(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<(String, SimilarityDeltas)>> {
    cfg.validate()?;
    io(dir, fs::create_dir_all(dir))?;
    let (n_models, n_rollouts) = (cfg.similarity.n_models, cfg.similarity.n_rollouts);
    let base = cfg.seeds[0];
    let variants = cfg.variants();
    let jobs: Vec<(&Variant, u64)> = variants.iter().flat_map(|v| (0..n_models as u64).map(move |m| (v, base + m))).collect();
    let singles = pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(v, seed)| {
                harness::similarity_delta_experiment(&v.run, 1, n_rollouts, seed).map_err(|e| CliError::Variant(v.label.clone(), e))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let out: Vec<(String, SimilarityDeltas)> = variants
        .iter()
        .zip(singles.chunks(n_models))
        .map(|(v, chunk)| (v.label.clone(), merge_deltas(chunk, n_rollouts)))
        .collect();
    let path = dir.join("similarity.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Csv(path.clone(), e))?;
    let csv_err = |e| CliError::Csv(path.clone(), e);
    w.write_record(["variant", "layer", "label", "mean_delta", "n_models", "n_rollouts"]).map_err(csv_err)?;
    for (label, d) in &out {
        for l in &d.layers {
            w.write_record([
                label.clone(),
                l.layer.to_string(),
                l.label.clone(),
                l.mean_delta.to_string(),
                d.n_models.to_string(),
                d.n_rollouts.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::Io(path.clone(), e))?;
    let text = io(&path, fs::read_to_string(&path))?;
    let svg = plot::render(&text, FigureKind::Similarity)?;
    let svg_path = dir.join("similarity.svg");
    io(&svg_path, fs::write(&svg_path, svg))?;
    Ok(out)
}

/// Pools single-model experiments into one table.
pub fn merge_deltas(parts: &[SimilarityDeltas], n_rollouts: usize) -> SimilarityDeltas {
    let layers = parts[0]
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let per_model: Vec<f64> = parts.iter().flat_map(|p| p.layers[i].per_model.iter().copied()).collect();
            LayerDelta {
                layer: l.layer,
                label: l.label.clone(),
                mean_delta: per_model.iter().sum::<f64>() / per_model.len() as f64,
                per_model,
            }
        })
        .collect();
    SimilarityDeltas {
        layers,
        n_models: parts.len(),
        n_rollouts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let xs = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(median(&xs), 3.0);
        assert_eq!(iqr(&xs), 2.0);
        assert_eq!(median(&[1.0, 2.0]), 1.5);
        assert!(median(&[]).is_nan());
    }
}
