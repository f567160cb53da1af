//! Run configuration file (TOML).
//!
//! Every section is optional and missing keys take the module defaults.
//! Unknown keys are rejected with their full path, e.g. `train.lr_gama`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::loss::{DiceConfig, FocalConfig};
use crate::model::ModelConfig;
use crate::spatial_fusion::SffConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { root: PathBuf::from("data") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub sff: SffConfig,
    pub train: TrainConfig,
    pub focal: FocalConfig,
    pub dice: DiceConfig,
    pub data: DataConfig,
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => out.push(path),
            Some(toml::Value::Table(kt)) => {
                if let toml::Value::Table(gt) = v {
                    unknown_keys(gt, kt, &path, out);
                }
            }
            Some(_) => {}
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let given: toml::Table = text.parse().map_err(|e| Error::config(format!("invalid TOML: {e}")))?;
        let known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown key `{}`", unknown.join("`, `"))));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.stage_channels.len())?;
        self.sff.validate()?;
        self.train.validate()?;
        self.focal.validate()?;
        self.dice.validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            sff: self.sff.clone(),
        }
    }
}
