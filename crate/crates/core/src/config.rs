//! Run configuration: one JSON document with a section per component.
//!
//! Every section and key is optional; missing values take the defaults in
//! code, and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ama::AmaConfig;
use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::mcl::MclConfig;
use crate::paf::PafConfig;
use crate::trainer::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub paf: PafConfig,
    pub mcl: MclConfig,
    pub ama: AmaConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            text: self.text.clone(),
            image: self.image.clone(),
            paf: self.paf.clone(),
            mcl: self.mcl.clone(),
            ama: self.ama.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()
    }

    /// Parse and validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical serialization, every value written out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
