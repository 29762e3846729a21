//! Triangle CSV files (`accident,development,value`) and dataset folders.

use std::fs;
use std::path::{Path, PathBuf};

use adlp_core::simulate::{SynthConfig, SyntheticDataset};
use adlp_core::{Triangle, TriangleKind};
use serde::{Deserialize, Serialize};

use crate::config::IngestPaths;
use crate::error::{AdlpError, CoreContext, Result, Stage};

#[derive(Debug, Serialize, Deserialize)]
struct TriangleRow {
    accident: u32,
    development: u32,
    value: f64,
}

pub fn read_triangle(path: &Path, kind: TriangleKind) -> Result<Triangle> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(Stage::Ingest, path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<TriangleRow>() {
        let r = rec.map_err(|e| csv_error(Stage::Ingest, path, e))?;
        rows.push((r.accident, r.development, r.value));
    }
    Triangle::ingest(&rows, kind).at(Stage::Ingest, &path.display().to_string())
}

pub fn write_triangle(path: &Path, tri: &Triangle) -> Result<()> {
    write_rows(path, Stage::Generate, tri.rows().into_iter().map(|(accident, development, value)| TriangleRow {
        accident,
        development,
        value,
    }))
}

/// Serialises `rows` to a CSV file with a header line.
pub fn write_rows<T: Serialize>(path: &Path, stage: Stage, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(stage, path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(stage, path, e))?;
    }
    w.flush().map_err(|e| AdlpError::io(stage, path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(stage, path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_error(stage, path, e))).collect()
}

fn csv_error(stage: Stage, path: &Path, e: csv::Error) -> AdlpError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AdlpError::io(stage, path, io),
        other => AdlpError::format(stage, path, format!("{other:?}")),
    }
}

pub fn write_json<T: Serialize>(path: &Path, stage: Stage, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AdlpError::format(stage, path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| AdlpError::io(stage, path, e))
}

pub fn create_dir(path: &Path, stage: Stage) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| AdlpError::io(stage, path, e))
}

/// Contents of a dataset's `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: u64,
    pub config: SynthConfig,
}

pub const PAID_FILE: &str = "paid.csv";
pub const REPORTED_FILE: &str = "reported.csv";
pub const FINALISED_FILE: &str = "finalised.csv";
pub const META_FILE: &str = "meta.json";

/// Writes the three full squares and `meta.json` into `dir`.
pub fn write_dataset(dir: &Path, data: &SyntheticDataset, meta: &DatasetMeta) -> Result<Vec<PathBuf>> {
    create_dir(dir, Stage::Generate)?;
    let files = [
        (dir.join(PAID_FILE), &data.paid),
        (dir.join(REPORTED_FILE), &data.reported),
        (dir.join(FINALISED_FILE), &data.finalised),
    ];
    let mut written = Vec::new();
    for (path, tri) in &files {
        write_triangle(path, tri)?;
        written.push(path.clone());
    }
    let meta_path = dir.join(META_FILE);
    write_json(&meta_path, Stage::Generate, meta)?;
    written.push(meta_path);
    Ok(written)
}

/// Paths of a dataset folder written by [`write_dataset`].
pub fn dataset_paths(dir: &Path, name: &str) -> IngestPaths {
    IngestPaths {
        name: Some(name.to_string()),
        paid: dir.join(PAID_FILE),
        reported: Some(dir.join(REPORTED_FILE)),
        finalised: Some(dir.join(FINALISED_FILE)),
    }
}
