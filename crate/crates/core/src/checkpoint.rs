//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 4     | magic `LSCK`                              |
//! | 4     | format version (`u32`, currently 1)       |
//! | 8     | header length `n` in bytes (`u64`)        |
//! | n     | UTF-8 JSON header                         |
//! | rest  | `f32` tensor payload                      |
//!
//! The header records the model, loss and training configuration, progress
//! counters, the seed and random stream position, and for each tensor its
//! name, shape and element offset into the payload. Model parameters use
//! their registered names; optimizer moments are stored as `adam.m.<name>`
//! and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{AsdModel, ModelConfig};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const MAGIC: &[u8; 4] = b"LSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    /// Position of the training random stream, as a decimal string.
    pub rng_word_pos: String,
    pub adam_steps: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Rebuilds the network and overwrites every parameter from the file.
    pub fn model<S: Scalar>(&self) -> Result<AsdModel<S>> {
        let mut model = AsdModel::<S>::new(self.header.model.clone(), self.header.seed)?;
        restore_params(&mut model.params, |name| self.tensor(name))?;
        Ok(model)
    }
}

/// Copies `lookup(name)` into each parameter, checking shapes.
pub fn restore_params<'a, S: Scalar>(
    store: &mut ParamStore<S>,
    lookup: impl Fn(&str) -> Option<&'a Tensor<f32>>,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let src = lookup(&name).ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
        if src.shape() != store.get(id).shape() {
            return Err(Error::Data(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                src.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = src.cast();
    }
    Ok(())
}

/// Writes `header` (whose tensor index is rebuilt) and `tensors`.
pub fn save_checkpoint(path: &Path, mut header: CheckpointHeader, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut offset = 0;
    header.tensors = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + n).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let payload = &bytes[16 + n..];
    let tensors = header
        .tensors
        .iter()
        .map(|e| {
            let len: usize = e.shape.iter().product();
            let raw = payload
                .get(4 * e.offset..4 * (e.offset + len))
                .ok_or_else(|| bad(&format!("tensor {} out of range", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::from_vec(&e.shape, data))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint { header, tensors })
}
