use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,block,split,loss,lr,acc_ensemble,acc_block,seconds,peak_bytes";

/// One line of the per-seed metrics log. `block` is `None` for the single
/// end-to-end row in BP mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub block: Option<usize>,
    pub split: &'static str,
    pub loss: f64,
    pub lr: f64,
    pub acc_ensemble: Option<f64>,
    pub acc_block: Option<f64>,
    pub seconds: f64,
    pub peak_bytes: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.block.map(|b| b.to_string()).unwrap_or_else(|| "all".into()),
            self.split,
            self.loss,
            self.lr,
            opt(self.acc_ensemble),
            opt(self.acc_block),
            self.seconds,
            self.peak_bytes
        )
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_block_accuracy: Vec<f64>,
    pub params: usize,
    pub wall_seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub test_accuracy: MeanStd,
    pub best_val_accuracy: MeanStd,
    pub wall_seconds: MeanStd,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: TrainConfig,
    pub seeds: Vec<SeedSummary>,
    pub aggregate: Aggregate,
}

pub fn aggregate(seeds: &[SeedSummary]) -> Aggregate {
    let col = |f: fn(&SeedSummary) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        test_accuracy: col(|s| s.test_accuracy),
        best_val_accuracy: col(|s| s.best_val_accuracy),
        wall_seconds: col(|s| s.wall_seconds),
        peak_bytes: seeds.iter().map(|s| s.peak_bytes).max().unwrap_or(0),
    }
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
