//! Training loops for both tasks, fold orchestration, ensembling, and the
//! task-2 fine-tuning stage.

mod augment;
mod ensemble;
mod fusion_loop;
mod ppmae_loop;
mod task2;

pub use augment::{
    augment_pair, flip_horizontal, flip_vertical, gaussian_blur, rotate, AugmentSpec,
};
pub use ensemble::{argmax_tie_low, ensemble_predict, ensemble_predict_mode, softmax, EnsembleMode};
pub use fusion_loop::{load_fusion_dataset, train_fusion, FusionSample};
pub use ppmae_loop::{copy_baseline_masked_mse, load_ppmae_pairs, masked_val_mse, split_indices, train_ppmae};
pub use task2::{finetune_task2, predict_task2};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::DataError;
use crate::metrics::MetricsError;
use crate::models::ModelError;
use crate::numerics::NumericsError;
use crate::patchwork::PatchError;
use crate::preprocess::PreprocessError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("fold {fold} has no validation samples")]
    EmptyFold { fold: usize },
    #[error("manifest has no usable samples: {0}")]
    NoSamples(String),
    #[error("ensemble: {0}")]
    Ensemble(String),
    #[error("log io: {path}: {source}")]
    LogIo { path: std::path::PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainTask {
    FusionEarly,
    FusionLate,
    Ppmae,
    FinetuneTask2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: TrainTask,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Train fraction of the train/val split (fusion training uses folds
    /// instead; this drives the autoencoder and fine-tuning splits).
    pub split_ratio: f64,
    pub augment: bool,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TrainTask::FusionLate,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 30,
            split_ratio: 0.75,
            augment: true,
            k_folds: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be >= 1".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio <= 1.0) {
            return Err(TrainError::BadConfig(format!(
                "split ratio {} outside (0,1]",
                self.split_ratio
            )));
        }
        // fine-tuning may run zero epochs (checkpoints pass through)
        if self.epochs == 0 && self.task != TrainTask::FinetuneTask2 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.k_folds < 2 {
            return Err(TrainError::BadConfig(format!("k_folds must be >= 2, got {}", self.k_folds)));
        }
        Ok(())
    }
}

/// One metrics-log line; empty cells where a column does not apply.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: Option<f64>,
    pub f1: Option<f64>,
    pub rk: Option<f64>,
    pub spec: Option<f64>,
    pub qwk: Option<f64>,
    pub mse: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,split,loss,f1,rk,spec,qwk,mse";

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.split,
            fmt_cell(r.loss),
            fmt_cell(r.f1),
            fmt_cell(r.rk),
            fmt_cell(r.spec),
            fmt_cell(r.qwk),
            fmt_cell(r.mse),
        ));
    }
    std::fs::write(path, out).map_err(|e| TrainError::LogIo { path: path.to_path_buf(), source: e })
}
