//! Run configuration: one JSON document with sections `backbones`,
//! `cp_adapter`, `pcmrd`, `training`, `data` and `eval`. Every key is
//! optional and unknown keys are rejected.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::backbones::BackboneConfig;
use crate::cp_adapter::CpAdapterConfig;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THRESHOLDS;
use crate::model::ModelConfig;
use crate::pcmrd::PcmrdConfig;
use crate::synthdata::SynthConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbones: BackboneConfig,
    pub cp_adapter: CpAdapterConfig,
    pub pcmrd: PcmrdConfig,
    pub training: TrainConfig,
    pub data: SynthConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbones: self.backbones.clone(),
            cp_adapter: self.cp_adapter.clone(),
            pcmrd: self.pcmrd.clone(),
        }
    }

    /// Every section is checked; errors come back as configuration errors.
    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(m),
                other => Error::Config(other.to_string()),
            })
        };
        wrap(self.model().validate())?;
        wrap(self.training.validate())?;
        wrap(self.data.validate())?;
        if self.data.canvas % self.backbones.downsample != 0 {
            return Err(Error::Config(format!(
                "data.canvas {} must be divisible by backbones.downsample {}",
                self.data.canvas, self.backbones.downsample
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        if let Some(t) = self.eval.thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("eval threshold {t} outside (0, 1]")));
        }
        Ok(())
    }
}
