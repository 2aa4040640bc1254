use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HgnnError, Model, ModelConfig};
use crate::json::{canonical_json, write_atomic};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "cfg2vec-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model: weights by name, layer layout and init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub params: BTreeMap<String, ParamRecord>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, HgnnError> {
        Ok(canonical_json(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, HgnnError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(HgnnError::Checkpoint(format!(
                "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), HgnnError> {
        let text = self.to_json()?;
        write_atomic(path, text.as_bytes())
            .map_err(|e| HgnnError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, HgnnError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HgnnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| HgnnError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .params
            .iter()
            .map(|p| {
                let record = ParamRecord {
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                };
                (p.name.clone(), record)
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config,
            params,
            seed: self.seed,
        }
    }

    /// Rebuilds the layout from the stored config, then overwrites every
    /// weight. Missing, extra or misshapen tensors are rejected.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, HgnnError> {
        let mut model = Model::new(ckpt.config, ckpt.seed)?;
        if ckpt.params.len() != model.params.len() {
            return Err(HgnnError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                ckpt.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            let record = ckpt
                .params
                .get(&p.name)
                .ok_or_else(|| HgnnError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if record.shape != p.value.shape() {
                return Err(HgnnError::Checkpoint(format!(
                    "parameter {}: shape {:?}, expected {:?}",
                    p.name,
                    record.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(record.shape.clone(), record.data.clone())
                .map_err(|e| HgnnError::Checkpoint(format!("parameter {}: {e}", p.name)))?;
        }
        Ok(model)
    }
}
