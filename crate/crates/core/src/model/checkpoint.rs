//! Single-archive checkpoint: every parameter group, temperature, vocab,
//! encoder config, running statistics, and (optionally) optimizer state.
//!
//! JSON with shortest-round-trip float formatting, so parameters reload
//! bit-exactly and files are byte-stable for identical state.

use super::{BnStats, EncoderConfig, Model, ModelError};
use crate::text::Vocab;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&ArrayD<f64>> for TensorData {
    fn from(a: &ArrayD<f64>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }
}

impl TensorData {
    pub fn to_array(&self) -> Result<ArrayD<f64>, ModelError> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| ModelError::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

/// Adam state captured for exact training resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub step: usize,
    pub m: Vec<TensorData>,
    pub v: Vec<TensorData>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub param_names: Vec<String>,
    pub param_values: Vec<TensorData>,
    pub bn_running: Vec<BnStatsData>,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatsData {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn save_checkpoint(
    model: &Model,
    optimizer: Option<OptimizerSnapshot>,
    path: &Path,
) -> Result<(), ModelError> {
    let ckpt = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        param_names: model.params.iter().map(|(n, _)| n.to_string()).collect(),
        param_values: model.params.iter().map(|(_, v)| v.into()).collect(),
        bn_running: model
            .bn_running
            .iter()
            .map(|s| BnStatsData {
                mean: s.mean.to_vec(),
                var: s.var.to_vec(),
            })
            .collect(),
        optimizer,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| ModelError::Checkpoint(format!("create dir: {e}")))?;
    }
    let json = serde_json::to_string(&ckpt)
        .map_err(|e| ModelError::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| ModelError::Checkpoint(format!("write: {e}")))
}

/// Rebuild a model (and optimizer state, when present) from an archive.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<OptimizerSnapshot>), ModelError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ModelError::Checkpoint(format!("read {}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| ModelError::Checkpoint(format!("parse {}: {e}", path.display())))?;
    if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "schema version {} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})",
            ckpt.schema_version
        )));
    }
    // validate() rejects a mismatched embed_dim among other config errors.
    ckpt.config.validate()?;

    let mut model = Model::new(ckpt.config, ckpt.vocab, 0)?;
    if ckpt.param_names.len() != model.params.len()
        || ckpt.param_values.len() != model.params.len()
    {
        return Err(ModelError::Checkpoint(format!(
            "parameter count mismatch: archive has {}, model expects {}",
            ckpt.param_names.len(),
            model.params.len()
        )));
    }
    for (i, r) in model.params.refs().enumerate().collect::<Vec<_>>() {
        let name = model.params.name(r).to_string();
        if ckpt.param_names[i] != name {
            return Err(ModelError::Checkpoint(format!(
                "parameter {i} name mismatch: archive {:?}, model {:?}",
                ckpt.param_names[i], name
            )));
        }
        let value = ckpt.param_values[i].to_array()?;
        if value.shape() != model.params.value(r).shape() {
            return Err(ModelError::Checkpoint(format!(
                "parameter {name} shape mismatch: archive {:?}, model {:?}",
                value.shape(),
                model.params.value(r).shape()
            )));
        }
        *model.params.value_mut(r) = value;
    }
    if ckpt.bn_running.len() != model.bn_running.len() {
        return Err(ModelError::Checkpoint(
            "running-statistics count mismatch".into(),
        ));
    }
    for (slot, data) in ckpt.bn_running.iter().enumerate() {
        model.bn_running[slot] = BnStats {
            mean: data.mean.clone().into(),
            var: data.var.clone().into(),
        };
    }
    Ok((model, ckpt.optimizer))
}
