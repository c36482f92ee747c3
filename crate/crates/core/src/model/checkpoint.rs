//! Structured-text checkpoints.
//!
//! A checkpoint is one JSON document holding a magic string, a format
//! version, the model config and the flat parameter arrays keyed by name.
//! `f64` values are written in shortest round-trip form, so loading gives
//! back bit-identical parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore, PonderModel};
use crate::error::{Error, Result};
use crate::grad::Array;

pub const CHECKPOINT_MAGIC: &str = "PONDER-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    version: u32,
    model: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<ParamRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    /// Free-form metadata, e.g. the training config and chosen epoch.
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParamStore) -> Self {
        Self {
            model,
            params,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(name, a)| ParamRecord {
                    name: name.to_string(),
                    shape: a.shape().to_vec(),
                    data: a.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic `{}`", file.magic)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let model = PonderModel::new(file.model.clone())?;
        let expected = model.init_params();
        let mut params = ParamStore::new();
        for rec in file.params {
            let want = expected
                .get(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", rec.name)))?;
            if want.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, config implies {:?}",
                    rec.name,
                    rec.shape,
                    want.shape()
                )));
            }
            params.insert(rec.name, Array::new(rec.shape, rec.data)?)?;
        }
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config implies {}",
                params.len(),
                expected.len()
            )));
        }
        Ok(Self {
            model: file.model,
            params,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
