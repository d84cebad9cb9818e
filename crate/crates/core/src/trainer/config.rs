use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Preset, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// MNIST-style IDX files, optionally gzipped.
    Idx,
    /// CIFAR-10 binary batches.
    Cifar,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::Idx => "idx",
            DatasetFormat::Cifar => "cifar",
        })
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(DatasetFormat::Idx),
            "cifar" => Ok(DatasetFormat::Cifar),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// Everything an experiment needs, as flat keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub preset: Preset,
    pub widths: Option<Vec<usize>>,
    pub head_kernel: usize,
    pub dataset_format: DatasetFormat,
    pub data_dir: PathBuf,
    /// Draw this many training samples before the train/validation split.
    pub subsample: Option<usize>,
    /// Evaluate on at most this many test samples.
    pub test_subsample: Option<usize>,
    pub val_fraction: f64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Classifier learning rate in BP mode; defaults to `lr`.
    pub lr_classifier: Option<f64>,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub exclude_first_block: bool,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Sequential kernels and zeroed timings, for byte-identical artifacts.
    pub deterministic: bool,
    pub account_memory: bool,
    pub pipelined: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Sff,
            preset: Preset::Cnnb,
            widths: None,
            head_kernel: 1,
            dataset_format: DatasetFormat::Idx,
            data_dir: PathBuf::from("data/mnist"),
            subsample: None,
            test_subsample: None,
            val_fraction: 0.2,
            seeds: vec![0],
            epochs: 100,
            batch_size: 128,
            lr: 3e-4,
            lr_classifier: None,
            weight_decay: 1e-6,
            plateau_patience: 10,
            plateau_factor: 0.1,
            early_stop_patience: 30,
            exclude_first_block: false,
            checkpoint_in: None,
            checkpoint_out: None,
            out_dir: PathBuf::from("runs"),
            deterministic: false,
            account_memory: false,
            pipelined: false,
        }
    }
}

/// Learning rates searched by `sweep`.
pub const SWEEP_LR: [f64; 16] = [
    7e-5, 1e-4, 3e-4, 5e-4, 7e-4, 1e-3, 3e-3, 5e-3, 7e-3, 1e-2, 3e-2, 5e-2, 7e-2, 1e-1, 3e-1, 5e-1,
];
/// Weight decays searched by `sweep`.
pub const SWEEP_WD: [f64; 5] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5];

impl TrainConfig {
    pub fn lr_classifier(&self) -> f64 {
        self.lr_classifier.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=100).contains(&self.epochs) {
            return bad(format!("epochs must be in 1..=100, got {}", self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        for (name, v) in [("lr", self.lr), ("lr_classifier", self.lr_classifier())] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("validation fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.head_kernel.is_multiple_of(2) {
            return bad(format!("head kernel must be odd, got {}", self.head_kernel));
        }
        if let Some(w) = &self.widths {
            if w.len() != 3 || w.contains(&0) {
                return bad(format!("widths must be three positive values, got {w:?}"));
            }
        }
        if matches!(self.subsample, Some(0)) || matches!(self.test_subsample, Some(0)) {
            return bad("subsample sizes must be positive".into());
        }
        Ok(())
    }
}
