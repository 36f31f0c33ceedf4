//! Per-step metrics rows, their CSV encoding, and quantile summaries.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Column order of the metrics CSV.
pub const COLUMNS: [&str; 13] = [
    "step",
    "wall_seconds",
    "train_loss",
    "train_err",
    "valid_err",
    "test_err",
    "tr_ideal",
    "tr_stale",
    "tr_unif",
    "gtrue_sq_est",
    "kept_fraction",
    "params_version",
    "fallback_flag",
];

/// One logged training step. Empty optional fields mean "not measured".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub wall_seconds: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub valid_err: Option<f64>,
    pub test_err: Option<f64>,
    pub tr_ideal: Option<f64>,
    pub tr_stale: Option<f64>,
    pub tr_unif: Option<f64>,
    pub gtrue_sq_est: Option<f64>,
    pub kept_fraction: Option<f64>,
    pub params_version: u64,
    /// 1 when an importance-sampling run used uniform sampling for this step.
    pub fallback_flag: u8,
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unexpected header {0:?}")]
    Header(Vec<String>),
}

pub fn write_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<(), MetricsError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(COLUMNS)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, rows: &[MetricsRow]) -> Result<(), MetricsError> {
    write_csv(File::create(path)?, rows)
}

pub fn read_csv_file(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != COLUMNS {
        return Err(MetricsError::Header(header));
    }
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

/// Linear-interpolation quantile of unsorted data (`q` in `[0, 1]`). NaN if empty.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// First quartile, median, third quartile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        Self { q1: quantile(values, 0.25), median: quantile(values, 0.5), q3: quantile(values, 0.75) }
    }
}
