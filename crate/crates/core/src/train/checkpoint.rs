//! Checkpoint file: magic, version, JSON header, packed little-endian f32
//! blocks (parameters, then first and second moments when present).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CUEDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    step: usize,
    optimizer_step: Option<u64>,
    params: Vec<ParamEntry>,
    model: ModelConfig,
    train: Option<TrainConfig>,
    config_hash: String,
}

/// Everything needed to rebuild a model and resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub names: Vec<String>,
    pub params: Vec<Tensor<f32>>,
    pub optimizer: Option<AdamState<f32>>,
    /// Optimiser steps taken; data order and input noise derive from the
    /// run seed and this counter.
    pub step: usize,
    pub config_hash: String,
}

/// Short hex digest of the model and training configuration.
pub fn config_hash(model: &ModelConfig, train: Option<&TrainConfig>) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialise");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            model_config: model.config.clone(),
            train_config: None,
            names: model.params.names().to_vec(),
            params: model.params.values().to_vec(),
            optimizer: None,
            step: 0,
            config_hash: config_hash(&model.config, None),
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            train_config: Some(t.config.clone()),
            optimizer: Some(t.state.clone()),
            step: t.step,
            config_hash: config_hash(&t.model.config, Some(&t.config)),
            ..Self::from_model(&t.model)
        }
    }

    /// Rebuilds the model; refuses parameter name or shape mismatches.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(&self.model_config, 0)?;
        if model.params.names() != self.names.as_slice() {
            return Err(Error::Checkpoint("parameter names differ from the configured model".into()));
        }
        for ((slot, saved), name) in model.params.values_mut().iter_mut().zip(&self.params).zip(&self.names) {
            if slot.shape() != saved.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored {:?}, model expects {:?}",
                    saved.shape(),
                    slot.shape()
                )));
            }
            *slot = saved.clone();
        }
        Ok(model)
    }

    /// Warning text when `train` differs from the configuration that
    /// produced this checkpoint.
    pub fn resume_warning(&self, train: &TrainConfig) -> Option<String> {
        let now = config_hash(&self.model_config, Some(train));
        (now != self.config_hash).then(|| {
            format!("config hash {now} differs from checkpoint {}; resuming anyway", self.config_hash)
        })
    }

    /// Trainer resuming from this checkpoint under `train`.
    pub fn trainer(&self, train: TrainConfig) -> Result<Trainer> {
        if let Some(w) = self.resume_warning(&train) {
            log::warn!("{w}");
        }
        let mut t = Trainer::new(self.model()?, train)?;
        if let Some(state) = &self.optimizer {
            t.state = state.clone();
        }
        t.step = self.step;
        Ok(t)
    }
}

fn push_block(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        step: ckpt.step,
        optimizer_step: ckpt.optimizer.as_ref().map(|s| s.step),
        params: ckpt
            .names
            .iter()
            .zip(&ckpt.params)
            .map(|(n, p)| ParamEntry {
                name: n.clone(),
                shape: p.shape().to_vec(),
            })
            .collect(),
        model: ckpt.model_config.clone(),
        train: ckpt.train_config.clone(),
        config_hash: ckpt.config_hash.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    ckpt.params.iter().for_each(|p| push_block(&mut out, p));
    if let Some(s) = &ckpt.optimizer {
        s.m.iter().chain(&s.v).for_each(|p| push_block(&mut out, p));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::format(path, detail);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(Error::Checkpoint(format!("dtype {}", header.dtype)));
    }
    let mut offset = 20 + hlen;
    let mut read_block = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| bad(format!("truncated at byte {offset} of {}", bytes.len())))?;
        offset = end;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(shape, data)
    };
    let params = header.params.iter().map(|p| read_block(&p.shape)).collect::<Result<Vec<_>>>()?;
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let m = header.params.iter().map(|p| read_block(&p.shape)).collect::<Result<Vec<_>>>()?;
            let v = header.params.iter().map(|p| read_block(&p.shape)).collect::<Result<Vec<_>>>()?;
            Some(AdamState { step, m, v })
        }
        None => None,
    };
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Checkpoint {
        model_config: header.model,
        train_config: header.train,
        names: header.params.into_iter().map(|p| p.name).collect(),
        params,
        optimizer,
        step: header.step,
        config_hash: header.config_hash,
    })
}
