use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scene::DatasetConfig;
use crate::train::TrainConfig;

/// Held-out split: same generator settings as training, other seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub scenes: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            scenes: 16,
            seed: 1_000_001,
        }
    }
}

/// Everything a run reads from its config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub validation: ValidationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Invalid(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.noise.validate()?;
        self.dataset.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset.bins != self.model.bins.bins {
            return Err(Error::Invalid(format!(
                "prior has {} bins, model {}",
                self.dataset.bins, self.model.bins.bins
            )));
        }
        if self.validation.scenes == 0 {
            return Err(Error::Invalid("validation needs at least one scene".into()));
        }
        Ok(())
    }

    pub fn validation_dataset(&self) -> DatasetConfig {
        DatasetConfig {
            scenes: self.validation.scenes,
            seed: self.validation.seed,
            ..self.dataset.clone()
        }
    }
}
