//! Checkpoints in the DRIS container: a `meta` JSON entry, adapter and
//! decoder tensors under `cp_adapter/` and `pcmrd/`, and optimizer moments
//! under `optim/`. Encoder weights are not stored; they are rebuilt from the
//! configuration and checked against `backbone_digest`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::container::{digest, Container, TensorData};
use crate::error::{Error, Result};
use crate::model::DiffRis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    /// Test fixture: evaluation returns the ground truth.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub backbone_digest: String,
    pub best_val_miou: f64,
    pub best_epoch: usize,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, TensorData>,
    pub optimizer: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn capture(model: &DiffRis, meta: CheckpointMeta, optimizer: BTreeMap<String, TensorData>) -> Result<Self> {
        let mut params = model.adapter_params.snapshot()?;
        params.extend(model.decoder_params.snapshot()?);
        Ok(Self { meta, params, optimizer })
    }

    pub fn oracle(config: RunConfig) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: CheckpointKind::Oracle,
                epoch: 0,
                step: 0,
                backbone_digest: String::new(),
                best_val_miou: 1.0,
                best_epoch: 0,
                config,
            },
            params: BTreeMap::new(),
            optimizer: BTreeMap::new(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert_text("meta", serde_json::to_string(&self.meta)?);
        for (k, v) in &self.params {
            c.insert_tensor(k.clone(), v.clone());
        }
        for (k, v) in &self.optimizer {
            c.insert_tensor(format!("optim/{k}"), v.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c
            .text("meta")
            .ok_or_else(|| Error::Container("checkpoint has no `meta` entry".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta)?;
        let mut params = c.tensors_with_prefix("cp_adapter/");
        params.extend(c.tensors_with_prefix("pcmrd/"));
        let optimizer = c
            .tensors_with_prefix("optim/")
            .into_iter()
            .map(|(k, v)| (k["optim/".len()..].to_string(), v))
            .collect();
        Ok(Self { meta, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Rebuild the model this checkpoint was taken from.
    pub fn model(&self) -> Result<DiffRis> {
        if self.meta.kind != CheckpointKind::Model {
            return Err(Error::Usage("an oracle checkpoint has no model".into()));
        }
        let t = &self.meta.config.training;
        let model = DiffRis::new(&self.meta.config.model(), t.seed, t.dtype.dtype(), &Device::Cpu, false)?;
        self.restore(&model)?;
        Ok(model)
    }

    /// Load adapter and decoder weights into `model` after checking that its
    /// encoders match the recorded digest.
    pub fn restore(&self, model: &DiffRis) -> Result<()> {
        let d = digest(&model.backbones.params.snapshot()?);
        if d != self.meta.backbone_digest {
            return Err(Error::Container(format!(
                "encoder digest {d} does not match checkpoint digest {}",
                self.meta.backbone_digest
            )));
        }
        model.adapter_params.load(&self.params)?;
        model.decoder_params.load(&self.params)
    }
}

/// Fails with the name of the first tensor whose bytes differ.
pub fn assert_frozen(before: &BTreeMap<String, TensorData>, after: &BTreeMap<String, TensorData>) -> Result<()> {
    for (name, b) in before {
        match after.get(name) {
            Some(a) if a.bitwise_eq(b) => {}
            _ => return Err(Error::FrozenViolation { tensor: name.clone() }),
        }
    }
    if let Some(extra) = after.keys().find(|k| !before.contains_key(*k)) {
        return Err(Error::FrozenViolation { tensor: extra.clone() });
    }
    Ok(())
}
