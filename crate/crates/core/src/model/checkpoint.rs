//! Checkpoint persistence.
//!
//! Layout: 4-byte magic, format version (u32 LE), header length (u64 LE),
//! a JSON header describing the run and the tensor directory, then every
//! tensor's data packed back to back as little-endian f32. The directory
//! records explicit byte offsets so a reader can verify the layout instead
//! of trusting it. Writing is deterministic: the same network state always
//! produces the same bytes.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackboneConfig, ClozeNetwork, ModelError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VCPC";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io failed for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint {path} is malformed in {section}: {reason}")]
    Format {
        path: PathBuf,
        section: &'static str,
        reason: String,
    },
    #[error("checkpoint does not fit this network: {reason}")]
    ConfigMismatch { reason: String },
    #[error("checkpoint is missing tensor {name:?}")]
    MissingTensor { name: String },
    #[error("checkpoint tensor {name:?} has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

/// Optimizer hyperparameters stored alongside velocity tensors so a resumed
/// run steps exactly like the uninterrupted one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSnapshot {
    pub learning_rate: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    pub momentum: f64,
}

fn default_lr_decay() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the data block.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    epoch: u64,
    seed: u64,
    clips_per_item: usize,
    num_action_classes: usize,
    backbone: BackboneConfig,
    optimizer: Option<OptimSnapshot>,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: run metadata plus named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub seed: u64,
    pub clips_per_item: usize,
    pub num_action_classes: usize,
    pub backbone: BackboneConfig,
    pub optimizer: Option<OptimSnapshot>,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Velocity tensors for the given parameters, in order.
    pub fn velocities(&self, param_names: &[String]) -> Result<Vec<Tensor<f32>>, CheckpointError> {
        param_names
            .iter()
            .map(|name| {
                let key = format!("optim.{name}.velocity");
                self.tensor(&key)
                    .cloned()
                    .ok_or(CheckpointError::MissingTensor { name: key })
            })
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(checkpoint.tensors.len());
    for (name, tensor) in &checkpoint.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += 4 * tensor.len() as u64;
    }
    let header = Header {
        epoch: checkpoint.epoch,
        seed: checkpoint.seed,
        clips_per_item: checkpoint.clips_per_item,
        num_action_classes: checkpoint.num_action_classes,
        backbone: checkpoint.backbone.clone(),
        optimizer: checkpoint.optimizer,
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Format {
        path: path.to_path_buf(),
        section: "header",
        reason: e.to_string(),
    })?;

    let mut bytes =
        Vec::with_capacity(16 + header_json.len() + offset as usize);
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, tensor) in &checkpoint.tensors {
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let format = |section: &'static str, reason: String| CheckpointError::Format {
        path: path.to_path_buf(),
        section,
        reason,
    };
    if bytes.len() < 16 {
        return Err(format("prelude", format!("file is {} bytes, needs at least 16", bytes.len())));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(format("magic", format!("got {:?}, expected {:?}", &bytes[0..4], CHECKPOINT_MAGIC)));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(format(
            "version",
            format!("unsupported version {version}, expected {CHECKPOINT_FORMAT_VERSION}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(header_len).filter(|&end| end <= bytes.len());
    let Some(data_start) = data_start else {
        return Err(format(
            "header",
            format!("declared header length {header_len} exceeds file size {}", bytes.len()),
        ));
    };
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| format("header", e.to_string()))?;

    let data = &bytes[data_start..];
    let mut seen = HashSet::new();
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(format(
                "tensor directory",
                format!("duplicate tensor name {:?}", entry.name),
            ));
        }
        if entry.dtype != "f32" {
            return Err(format(
                "tensor directory",
                format!("tensor {:?} has unsupported dtype {:?}", entry.name, entry.dtype),
            ));
        }
        if entry.offset != expected_offset {
            return Err(format(
                "tensor directory",
                format!(
                    "tensor {:?} at offset {}, expected packed offset {}",
                    entry.name, entry.offset, expected_offset
                ),
            ));
        }
        let len = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                format("tensor directory", format!("tensor {:?} shape overflows", entry.name))
            })?;
        let nbytes = 4 * len;
        let start = expected_offset as usize;
        if data.len() < start + nbytes {
            return Err(format(
                "tensor data",
                format!(
                    "tensor {:?} needs {} bytes at offset {}, but the data block holds {}",
                    entry.name,
                    nbytes,
                    start,
                    data.len()
                ),
            ));
        }
        let values: Vec<f32> = data[start..start + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(&entry.shape, values).map_err(|e| {
            format("tensor data", format!("tensor {:?}: {e}", entry.name))
        })?;
        tensors.push((entry.name.clone(), tensor));
        expected_offset += nbytes as u64;
    }
    if data.len() as u64 != expected_offset {
        return Err(format(
            "tensor data",
            format!(
                "data block holds {} bytes, directory accounts for {expected_offset}",
                data.len()
            ),
        ));
    }
    Ok(Checkpoint {
        epoch: header.epoch,
        seed: header.seed,
        clips_per_item: header.clips_per_item,
        num_action_classes: header.num_action_classes,
        backbone: header.backbone,
        optimizer: header.optimizer,
        tensors,
    })
}

impl ClozeNetwork<f32> {
    /// Snapshots every parameter, optionally with optimizer velocities
    /// (aligned with [`Self::param_names`] order).
    pub fn to_checkpoint(
        &self,
        epoch: u64,
        seed: u64,
        optimizer: Option<(OptimSnapshot, &[Tensor<f32>])>,
    ) -> Result<Checkpoint, ModelError> {
        let names = self.param_names();
        let mut tensors = Vec::with_capacity(2 * names.len());
        for (i, name) in names.iter().enumerate() {
            tensors.push((name.clone(), self.param(i).clone()));
        }
        if let Some((_, velocities)) = &optimizer {
            if velocities.len() != names.len() {
                return Err(ModelError::InvalidConfig {
                    reason: format!(
                        "{} velocity tensors for {} parameters",
                        velocities.len(),
                        names.len()
                    ),
                });
            }
            for (i, (name, velocity)) in names.iter().zip(velocities.iter()).enumerate() {
                if velocity.shape() != self.param(i).shape() {
                    return Err(ModelError::Checkpoint(CheckpointError::ShapeMismatch {
                        name: format!("optim.{name}.velocity"),
                        expected: self.param(i).shape().to_vec(),
                        actual: velocity.shape().to_vec(),
                    }));
                }
                tensors.push((format!("optim.{name}.velocity"), velocity.clone()));
            }
        }
        Ok(Checkpoint {
            epoch,
            seed,
            clips_per_item: self.clips_per_item(),
            num_action_classes: self.num_action_classes(),
            backbone: self.config().clone(),
            optimizer: optimizer.map(|(snapshot, _)| snapshot),
            tensors,
        })
    }

    /// Rebuilds the full network a checkpoint captured.
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self, ModelError> {
        let mut net = Self::zeroed(
            checkpoint.backbone.clone(),
            checkpoint.clips_per_item,
            checkpoint.num_action_classes,
        )?;
        for (i, name) in net.param_names().iter().enumerate() {
            let tensor = checkpoint
                .tensor(name)
                .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
            if tensor.shape() != net.param(i).shape() {
                return Err(ModelError::Checkpoint(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: net.param(i).shape().to_vec(),
                    actual: tensor.shape().to_vec(),
                }));
            }
            *net.param_mut(i) = tensor.clone();
        }
        Ok(net)
    }

    /// Replaces backbone parameters from a checkpoint, leaving every head
    /// exactly as initialized. The backbone layouts must match.
    pub fn load_backbone(&mut self, checkpoint: &Checkpoint) -> Result<(), ModelError> {
        if *self.config() != checkpoint.backbone {
            return Err(ModelError::Checkpoint(CheckpointError::ConfigMismatch {
                reason: "checkpoint backbone layout differs from this network's".into(),
            }));
        }
        let names = self.param_names();
        for i in 0..2 * self.backbone().num_stages() {
            let name = &names[i];
            let tensor = checkpoint
                .tensor(name)
                .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
            if tensor.shape() != self.param(i).shape() {
                return Err(ModelError::Checkpoint(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: self.param(i).shape().to_vec(),
                    actual: tensor.shape().to_vec(),
                }));
            }
            *self.param_mut(i) = tensor.clone();
        }
        Ok(())
    }
}
