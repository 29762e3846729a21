//! Report rows and the files they are written to.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{AdlpError, Result, Stage};
use crate::io::{read_rows, write_json, write_rows};
use crate::pipeline::{ExperimentReport, SweepReport};

/// Dataset label of rows averaged over datasets.
pub const POOLED: &str = "pooled";

pub const SCORES_FILE: &str = "scores.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const RESERVES_FILE: &str = "reserves.csv";
pub const TESTS_FILE: &str = "tests.csv";
pub const PER_AP_FILE: &str = "per_ap.csv";
pub const OPTIMIZER_FILE: &str = "optimizer.csv";
pub const COMPONENTS_FILE: &str = "components.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FILE: &str = "run.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_DATASETS_FILE: &str = "sweep_datasets.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub dataset: String,
    pub strategy: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerApRow {
    pub dataset: String,
    pub strategy: String,
    pub accident: u32,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub dataset: String,
    pub strategy: String,
    pub subset: usize,
    pub accident_from: u32,
    pub accident_to: u32,
    pub model: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReserveRow {
    pub dataset: String,
    pub strategy: String,
    pub central: f64,
    pub quantile_level: Option<f64>,
    pub quantile: Option<f64>,
    pub replicate_mean: Option<f64>,
    pub replicate_std_error: Option<f64>,
    /// Realised lower-triangle total.
    pub actual: f64,
    pub true_mean: Option<f64>,
    pub true_quantile: Option<f64>,
    pub bias: Option<f64>,
    pub bias_quantile: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub dataset: String,
    pub test: String,
    pub strategy_f: String,
    pub strategy_g: String,
    /// Mean over datasets with a finite statistic in pooled rows.
    pub statistic: Option<f64>,
    /// Datasets where `F` beat `G` significantly.
    pub rejections: Option<usize>,
    pub datasets: usize,
    pub lag: Option<usize>,
    pub fallback: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRow {
    pub dataset: String,
    pub strategy: String,
    pub subset: usize,
    pub iterations: usize,
    pub validation_log_score: f64,
    pub max_decrease: f64,
    pub max_simplex_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub dataset: String,
    pub model: String,
    pub validation_log_score: f64,
    pub out_of_sample_log_score: Option<f64>,
    pub floored_zeros: usize,
    pub merged_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    pub strategy: String,
    pub split: Option<u32>,
    pub datasets: usize,
    pub mean_log_score: f64,
}

/// Mean of `value` per key, keys in order of first appearance.
pub fn pool_rows<T, K: Ord + Clone>(rows: &[T], key: impl Fn(&T) -> K, value: impl Fn(&T) -> f64) -> Vec<(K, f64)> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let k = key(r);
        let e = acc.entry(k.clone()).or_insert_with(|| {
            order.push(k);
            (0.0, 0)
        });
        e.0 += value(r);
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|k| {
            let (s, n) = acc[&k];
            (k, s / n as f64)
        })
        .collect()
}

/// Deterministic description of a run; timings go to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub datasets: Vec<ManifestDataset>,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDataset {
    pub name: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Collects files as they are written and deletes them all if any later
/// write fails, so a failed run leaves no partial report behind.
pub struct OutputSet {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputSet {
    pub fn new(dir: &Path, stage: Stage) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| AdlpError::io(stage, dir, e))?;
        Ok(OutputSet { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let path = self.path(name);
        self.written.push(path.clone());
        write_rows(&path, Stage::Report, rows)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        self.written.push(path.clone());
        write_json(&path, Stage::Report, value)
    }

    pub fn names(&self) -> Vec<String> {
        self.written.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect()
    }

    /// Runs `f`; on failure removes every file written so far.
    pub fn guarded<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let out = f(self);
        if out.is_err() {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
            self.written.clear();
        }
        out
    }
}

fn manifest(cfg: &ExperimentConfig, command: &str, report: Option<&ExperimentReport>, files: Vec<String>) -> Manifest {
    let datasets = report
        .map(|r| {
            r.datasets
                .iter()
                .zip(&r.dataset_seeds)
                .map(|(d, s)| ManifestDataset { name: d.name.clone(), seed: *s })
                .collect()
        })
        .unwrap_or_default();
    Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed: cfg.seed,
        datasets,
        files,
        config: cfg.clone(),
    }
}

/// Writes every experiment report into `dir`.
pub fn write_experiment(cfg: &ExperimentConfig, report: &ExperimentReport, dir: &Path, started: u64) -> Result<Vec<PathBuf>> {
    let mut out = OutputSet::new(dir, Stage::Report)?;
    out.guarded(|o| {
        o.csv(SCORES_FILE, report.scores())?;
        o.csv(WEIGHTS_FILE, report.weights())?;
        o.csv(RESERVES_FILE, report.reserves())?;
        o.csv(TESTS_FILE, report.tests())?;
        o.csv(PER_AP_FILE, report.per_ap())?;
        o.csv(OPTIMIZER_FILE, report.optimizer())?;
        o.csv(COMPONENTS_FILE, report.components())?;
        let mut files = o.names();
        files.push(MANIFEST_FILE.into());
        o.json(MANIFEST_FILE, &manifest(cfg, "evaluate", Some(report), files))?;
        o.json(RUN_FILE, &RunInfo { started_unix: started, finished_unix: unix_now() })?;
        Ok(o.written.clone())
    })
}

pub fn write_sweep(cfg: &ExperimentConfig, sweep: &SweepReport, dir: &Path, started: u64) -> Result<Vec<PathBuf>> {
    let mut out = OutputSet::new(dir, Stage::Report)?;
    out.guarded(|o| {
        o.csv(SWEEP_FILE, sweep.pooled.iter())?;
        o.csv(SWEEP_DATASETS_FILE, sweep.by_dataset.iter())?;
        let mut files = o.names();
        files.push(MANIFEST_FILE.into());
        o.json(MANIFEST_FILE, &manifest(cfg, "sweep", None, files))?;
        o.json(RUN_FILE, &RunInfo { started_unix: started, finished_unix: unix_now() })?;
        Ok(o.written.clone())
    })
}

/// Pooled means per strategy and metric from a `scores.csv`, as a text table.
pub fn summarise_scores(path: &Path) -> Result<String> {
    let rows: Vec<ScoreRow> = read_rows(path, Stage::Report)?;
    let pooled: Vec<&ScoreRow> = rows.iter().filter(|r| r.dataset == POOLED).collect();
    if pooled.is_empty() {
        return Err(AdlpError::format(Stage::Report, path, "no pooled rows"));
    }
    let mut metrics: Vec<&str> = Vec::new();
    let mut strategies: Vec<&str> = Vec::new();
    for r in &pooled {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    let width = strategies.iter().map(|s| s.len()).max().unwrap_or(8).max(8);
    let mut text = format!("{:<width$}", "strategy");
    for m in &metrics {
        text.push_str(&format!(" {m:>20}"));
    }
    text.push('\n');
    for s in &strategies {
        text.push_str(&format!("{s:<width$}"));
        for m in &metrics {
            match pooled.iter().find(|r| r.strategy == *s && r.metric == *m) {
                Some(r) => text.push_str(&format!(" {:>20.6}", r.value)),
                None => text.push_str(&format!(" {:>20}", "-")),
            }
        }
        text.push('\n');
    }
    Ok(text)
}
