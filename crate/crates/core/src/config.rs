//! Training configuration, read from a flat `key = value` file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

/// Every field has a default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub pretrained: bool,
    pub pretrained_weights: Option<PathBuf>,
    pub freeze_backbone: bool,
    pub tile_size: usize,
    pub width_divisor: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 0.0025,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            pretrained: true,
            pretrained_weights: None,
            freeze_backbone: false,
            tile_size: 256,
            width_divisor: 1,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive")))
            }
        };
        positive(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
        )?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        positive(self.batch_size > 0, "batch_size")?;
        positive(self.epochs > 0, "epochs")?;
        positive(self.tile_size > 0, "tile_size")?;
        if !self.tile_size.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Config(format!(
                "tile_size {} must be a multiple of {INPUT_MULTIPLE}",
                self.tile_size
            )));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            width_divisor: self.width_divisor,
            backbone: BackboneConfig {
                pretrained: self.pretrained,
                frozen: self.freeze_backbone,
            },
            pretrained_weights: self.pretrained_weights.clone(),
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}
