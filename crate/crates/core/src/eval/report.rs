//! CSV reports with a JSON metadata sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalRow;
use crate::channel::GridConfig;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "axis,predictor,nmse_mean,nmse_stderr,n,seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DopplerHz,
    HorizonFrames,
    /// Single evaluation; the axis column holds the horizon.
    None,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doppler" | "doppler_hz" => Ok(Self::DopplerHz),
            "horizon" | "horizon_frames" => Ok(Self::HorizonFrames),
            other => Err(Error::Usage(format!(
                "unknown sweep axis {other:?}, expected doppler or horizon"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub axis: SweepAxis,
    pub grid: GridConfig,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    /// Model label to SHA-256 of its checkpoint file.
    pub models: BTreeMap<String, String>,
    /// Free-form settings recorded in the sidecar.
    pub notes: serde_json::Value,
}

impl EvalReport {
    pub fn new(axis: SweepAxis, grid: GridConfig, seed: u64) -> Self {
        Self {
            axis,
            grid,
            seed,
            rows: Vec::new(),
            models: BTreeMap::new(),
            notes: serde_json::Value::Null,
        }
    }

    /// Stable sort by axis value; predictors keep their insertion order.
    pub fn sort_rows(&mut self) {
        self.rows.sort_by(|a, b| a.axis.total_cmp(&b.axis));
    }

    /// Rows of one predictor in axis order.
    pub fn series(&self, predictor: &str) -> Vec<&EvalRow> {
        self.rows
            .iter()
            .filter(|r| r.predictor == predictor)
            .collect()
    }
}

/// The numeric fields of one CSV line.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub axis: f64,
    pub predictor: String,
    pub nmse_mean: f64,
    pub nmse_stderr: f64,
    pub n: usize,
    pub seed: u64,
}

impl From<&EvalRow> for CsvRow {
    fn from(r: &EvalRow) -> Self {
        Self {
            axis: r.axis,
            predictor: r.predictor.clone(),
            nmse_mean: r.nmse_mean,
            nmse_stderr: r.nmse_stderr,
            n: r.n,
            seed: r.seed,
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn csv_text(report: &EvalReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        // `{}` on f64 prints the shortest string that parses back exactly
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axis, r.predictor, r.nmse_mean, r.nmse_stderr, r.n, r.seed
        ));
    }
    out
}

/// Writes the CSV at `path` and `<path>.meta.json` beside it.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(bad) = report
        .rows
        .iter()
        .find(|r| r.predictor.contains([',', '\n']))
    {
        return Err(Error::Structural(format!(
            "predictor label {:?} cannot be written to CSV",
            bad.predictor
        )));
    }
    fs::write(path, csv_text(report)).map_err(|e| Error::io(path, e))?;
    let rows: Vec<serde_json::Value> = report
        .rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "axis": r.axis,
                "predictor": r.predictor,
                "excluded": r.excluded,
                "nmse_aggregate": r.nmse_aggregate,
            })
        })
        .collect();
    let meta = serde_json::json!({
        "axis": report.axis,
        "grid": report.grid,
        "seed": report.seed,
        "models": report.models,
        "notes": report.notes,
        "rows": rows,
    });
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Structural(format!("report metadata: {e}")))?;
    text.push('\n');
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Parses report CSV text; the message names the offending line.
pub fn parse_report_csv(text: &str) -> std::result::Result<Vec<CsvRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(format!("expected header {CSV_HEADER:?}, found {other:?}")),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| format!("line {}: {what}", i + 2);
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            Ok(CsvRow {
                axis: num(f[0])?,
                predictor: f[1].to_string(),
                nmse_mean: num(f[2])?,
                nmse_stderr: num(f[3])?,
                n: f[4].parse().map_err(|_| bad("bad count"))?,
                seed: f[5].parse().map_err(|_| bad("bad seed"))?,
            })
        })
        .collect()
}

pub fn read_report_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report_csv(&text).map_err(|msg| Error::format(path, msg))
}

/// Lowercase hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
