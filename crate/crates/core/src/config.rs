//! JSON run configuration: training options at the top level and the
//! architecture under `"model"`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, BlockSpec};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `[C, H, W]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub hidden: usize,
    pub entry_hidden: usize,
    pub prototypes: usize,
    pub mu_init_scale: f64,
    /// Replaces the default block stack when present.
    pub blocks: Option<Vec<BlockSpec>>,
    pub log_priors: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: [1, 16, 16],
            classes: 4,
            hidden: 32,
            entry_hidden: 8,
            prototypes: 8,
            mu_init_scale: 0.3,
            blocks: None,
            log_priors: None,
        }
    }
}

impl ModelConfig {
    pub fn to_arch(&self, seed: u64) -> Result<ArchSpec> {
        let mut arch = ArchSpec::desk(self.input, self.classes, self.hidden, self.entry_hidden);
        if let Some(blocks) = &self.blocks {
            arch.blocks = blocks.clone();
        }
        arch.prototypes = self.prototypes;
        arch.mu_init_scale = self.mu_init_scale;
        arch.log_priors = self.log_priors.clone();
        arch.seed = seed;
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(mut map) = value else {
            return Err(Error::Config("the configuration must be a JSON object".into()));
        };
        let model = match map.remove("model") {
            None => ModelConfig::default(),
            Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("model: {}", e)))?,
        };
        let train: TrainConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = Self { train, model };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.to_arch(self.train.seed)?;
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        self.model.to_arch(self.train.seed)
    }

    /// Effective configuration with every default filled in.
    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(&self.train)?;
        if let Value::Object(map) = &mut v {
            map.insert("model".into(), serde_json::to_value(&self.model)?);
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_json_str(&text)
}
