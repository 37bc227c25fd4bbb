//! Run configuration loaded from a single JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::TrainConfig;
use crate::dataset::AugmentConfig;
use crate::error::{Error, Result};
use crate::evaluation::PipelineMode;
use crate::unet::UNetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    Raw,
    Segmented,
    Both,
}

impl ModeSelection {
    pub fn modes(self) -> Vec<PipelineMode> {
        match self {
            ModeSelection::Raw => vec![PipelineMode::Raw],
            ModeSelection::Segmented => vec![PipelineMode::Segmented],
            ModeSelection::Both => vec![PipelineMode::Raw, PipelineMode::Segmented],
        }
    }
}

impl std::str::FromStr for ModeSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "segmented" => Ok(Self::Segmented),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("mode must be raw, segmented or both, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub dropout_rate: f64,
    pub aug: AugmentConfig,
    pub unet: UNetConfig,
    pub mode: ModeSelection,
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Fold-parallel worker count; defaults to min(k, available threads).
    pub workers: Option<usize>,
    /// Grad-CAM maps written per fold.
    pub cam_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 42,
            k: 5,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            l2_lambda: train.l2_lambda,
            dropout_rate: train.dropout_rate,
            aug: AugmentConfig::default(),
            unet: UNetConfig::default(),
            mode: ModeSelection::Both,
            data_root: None,
            out_dir: PathBuf::from("out"),
            workers: None,
            cam_samples: 4,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            l2_lambda: self.l2_lambda,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn worker_count(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
            self.k.min(threads)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        self.train_config().validate()?;
        self.aug.validate()?;
        self.unet.validate()
    }
}
