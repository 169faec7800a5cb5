//! Sectioned run configuration (`[model]`, `[train]`, `[data]`, `[loss]`).
//! Unknown keys are rejected; every key has a default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
    pub loss: LossConfig,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.loss = cfg.loss;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.loss.weights().validate()
    }

    /// The train section with the loss section folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            ..self.train.clone()
        }
    }

    /// Fully resolved configuration text; parsing it reproduces `self`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}
