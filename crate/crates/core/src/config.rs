//! Run configuration: one JSON document covering data synthesis,
//! preprocessing, model shapes, training, and augmentation, with two
//! built-in presets.
//!
//! A config file may name a `preset` (`desk_scale` or `paper_scale`) and
//! override whole sections; fields omitted inside a section fall back to
//! the desk-scale defaults for that section. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SynthConfig;
use crate::models::{EncoderConfig, FusionConfig, FusionKind, PpmaeConfig};
use crate::preprocess::PreprocessParams;
use crate::training::{AugmentSpec, TrainConfig, TrainTask};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("config path `{key}` = {path} does not exist")]
    MissingPath { key: String, path: PathBuf },
}

/// Classifier shape shared by both fusion variants; the channel count is
/// derived from the fusion kind at model-construction time.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub feature_dim: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub classes: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            feature_dim: 128,
            input_height: 32,
            input_width: 80,
            classes: 4,
        }
    }
}

impl ClassifierSection {
    pub fn paper() -> Self {
        let enc = EncoderConfig::paper(2);
        ClassifierSection {
            widths: enc.widths,
            blocks_per_stage: enc.blocks_per_stage,
            feature_dim: enc.feature_dim,
            input_height: 200,
            input_width: 512,
            classes: 4,
        }
    }

    pub fn to_fusion_config(&self, kind: FusionKind) -> FusionConfig {
        let in_channels = match kind {
            FusionKind::Early => 2,
            FusionKind::Late => 3,
        };
        FusionConfig {
            kind,
            encoder: EncoderConfig {
                in_channels,
                widths: self.widths.clone(),
                blocks_per_stage: self.blocks_per_stage,
                feature_dim: self.feature_dim,
            },
            input_height: self.input_height,
            input_width: self.input_width,
            classes: self.classes,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub preprocess: PreprocessParams,
    pub classifier: ClassifierSection,
    pub ppmae: PpmaeConfig,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    /// Named filesystem locations commands fall back to when the matching
    /// flag is not given (for example `classifier_dir`, `ppmae_checkpoint`).
    pub paths: BTreeMap<String, PathBuf>,
}

impl RunConfig {
    pub fn desk_scale() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            preprocess: PreprocessParams::default(),
            classifier: ClassifierSection::default(),
            ppmae: PpmaeConfig::desk(),
            train: TrainConfig::default(),
            augment: AugmentSpec::default(),
            paths: BTreeMap::new(),
        }
    }

    /// Published-scale settings: 200x512 classifier inputs, 224x224
    /// autoencoder inputs, batch 128, no LR schedule. Runnable, not
    /// expected to reproduce published numbers without the private data.
    pub fn paper_scale() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig {
                height: 200,
                width: 512,
                band_thickness: 75,
                tilt_range: 15.0,
                offset_range: (19, 62),
                pocket_radius: 17.0,
                ..SynthConfig::default()
            },
            preprocess: PreprocessParams {
                out_height: 200,
                out_width: 512,
                ..PreprocessParams::default()
            },
            classifier: ClassifierSection::paper(),
            ppmae: PpmaeConfig::paper(),
            train: TrainConfig {
                task: TrainTask::FusionLate,
                lr: 1e-4,
                weight_decay: 0.01,
                batch_size: 128,
                epochs: 150,
                split_ratio: 0.75,
                augment: true,
                k_folds: 4,
                seed: 0,
            },
            augment: AugmentSpec {
                hflip_prob: 0.5,
                vflip_prob: 0.5,
                rotate_deg: 10.0,
                brightness: 0.1,
                contrast: 0.1,
                blur_sigma: (0.1, 1.5),
                resized_crop: Some((0.6, 1.0)),
                perspective: false,
            },
            paths: BTreeMap::new(),
        }
    }

    /// Training hyperparameters from the published task-2 fine-tuning
    /// column: one epoch at 1e-5 over all data.
    pub fn finetune_defaults(mut train: TrainConfig) -> TrainConfig {
        train.task = TrainTask::FinetuneTask2;
        train.lr = 1e-5;
        train.epochs = 1;
        train.split_ratio = 1.0;
        train
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.augment.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ppmae.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.classifier
            .to_fusion_config(FusionKind::Early)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.preprocess.thresholds.is_empty() {
            return Err(ConfigError::Invalid("preprocess needs at least one threshold".into()));
        }
        for (key, path) in &self.paths {
            if !path.exists() {
                return Err(ConfigError::MissingPath { key: key.clone(), path: path.clone() });
            }
        }
        Ok(())
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(|p| p.as_path())
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    DeskScale,
    PaperScale,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    preset: Option<Preset>,
    seed: Option<u64>,
    synth: Option<SynthConfig>,
    preprocess: Option<PreprocessParams>,
    classifier: Option<ClassifierSection>,
    ppmae: Option<PpmaeConfig>,
    train: Option<TrainConfig>,
    augment: Option<AugmentSpec>,
    paths: Option<BTreeMap<String, PathBuf>>,
}

/// Parse a config file over its preset; `None` loads desk-scale defaults.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::desk_scale();
    let Some(path) = path else {
        return Ok(cfg);
    };
    let body = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
    let file: RunConfigFile = serde_json::from_str(&body)
        .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
    if let Some(Preset::PaperScale) = file.preset {
        cfg = RunConfig::paper_scale();
    }
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.synth {
        cfg.synth = v;
    }
    if let Some(v) = file.preprocess {
        cfg.preprocess = v;
    }
    if let Some(v) = file.classifier {
        cfg.classifier = v;
    }
    if let Some(v) = file.ppmae {
        cfg.ppmae = v;
    }
    if let Some(v) = file.train {
        cfg.train = v;
    }
    if let Some(v) = file.augment {
        cfg.augment = v;
    }
    if let Some(v) = file.paths {
        cfg.paths = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
