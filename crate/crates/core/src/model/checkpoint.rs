//! `VLDN` checkpoint container.
//!
//! Layout (little-endian): magic `VLDN`, `u32` version, `u64` manifest
//! length, UTF-8 JSON manifest, then raw tensor bytes in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Result, SpeakerModel};
use crate::tensor::{DType, Float, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VLDN";
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    step: u64,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Adam moments aligned with the model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot<T> {
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    /// Training step counter.
    pub step: u64,
    /// Parameters followed by batch-norm buffers.
    pub tensors: Vec<CheckpointTensor<T>>,
    pub optimizer: Option<OptimizerSnapshot<T>>,
}

impl<T: Float> Checkpoint<T> {
    pub fn from_model(model: &SpeakerModel<T>, step: u64, optimizer: Option<OptimizerSnapshot<T>>) -> Self {
        let store = model.store();
        let tensors = store
            .params()
            .iter()
            .chain(store.buffers())
            .map(|(name, t)| CheckpointTensor {
                name: name.clone(),
                tensor: t.clone(),
            })
            .collect();
        Self {
            config: model.config().clone(),
            step,
            tensors,
            optimizer,
        }
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn to_model(&self) -> Result<SpeakerModel<T>> {
        let mut model = SpeakerModel::skeleton(self.config.clone());
        model.load_tensors(&self.tensors)?;
        Ok(model)
    }

    /// Loads into a model built from a caller-chosen configuration; any
    /// tensor whose shape disagrees is reported by name.
    pub fn load_into(&self, model: &mut SpeakerModel<T>) -> Result<()> {
        model.load_tensors(&self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for t in &self.tensors {
            if !t.tensor.is_finite() {
                return Err(ModelError::NonFiniteParameter(t.name.clone()));
            }
        }
        let mut named: Vec<(String, &Tensor<T>)> = self.tensors.iter().map(|t| (t.name.clone(), &t.tensor)).collect();
        if let Some(opt) = &self.optimizer {
            let params = self.tensors.iter().take(opt.first_moment.len());
            for (p, m) in params.clone().zip(&opt.first_moment) {
                named.push((format!("{FIRST_MOMENT}{}", p.name), m));
            }
            for (p, v) in params.zip(&opt.second_moment) {
                named.push((format!("{SECOND_MOMENT}{}", p.name), v));
            }
        }
        let mut records = Vec::with_capacity(named.len());
        let mut offset = 0u64;
        for (name, t) in &named {
            records.push(TensorRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
                offset,
            });
            offset += (t.len() * T::DTYPE.size_of()) as u64;
        }
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: records,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| ModelError::Manifest(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(ModelError::Truncated("header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ModelError::Truncated("manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| ModelError::Manifest(e.to_string()))?;
        let body = &bytes[body_start..];
        let mut expected_offset = 0u64;
        let mut tensors = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for rec in &manifest.tensors {
            if rec.dtype != T::DTYPE {
                return Err(ModelError::DType {
                    found: rec.dtype,
                    requested: T::DTYPE,
                });
            }
            if rec.offset != expected_offset {
                return Err(ModelError::Manifest(format!(
                    "tensor '{}' at offset {}, expected {expected_offset}",
                    rec.name, rec.offset
                )));
            }
            let n: usize = rec.shape.iter().product();
            let len = n * T::DTYPE.size_of();
            let start = rec.offset as usize;
            let chunk = body
                .get(start..start + len)
                .ok_or_else(|| ModelError::Truncated(format!("tensor '{}'", rec.name)))?;
            let tensor = Tensor::new(rec.shape.clone(), T::from_le_bytes_slice(chunk))
                .map_err(|e| ModelError::Manifest(format!("tensor '{}': {e}", rec.name)))?;
            expected_offset += len as u64;
            if rec.name.starts_with(FIRST_MOMENT) {
                first.push(tensor);
            } else if rec.name.starts_with(SECOND_MOMENT) {
                second.push(tensor);
            } else {
                tensors.push(CheckpointTensor {
                    name: rec.name.clone(),
                    tensor,
                });
            }
        }
        if body.len() as u64 != expected_offset {
            return Err(ModelError::Manifest(format!(
                "{} payload bytes, manifest describes {expected_offset}",
                body.len()
            )));
        }
        let optimizer = manifest.optimizer_step.map(|step| OptimizerSnapshot {
            step,
            first_moment: first,
            second_moment: second,
        });
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint<T: Float>(model: &SpeakerModel<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, 0, None).save(path)
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<SpeakerModel<T>> {
    Checkpoint::load(path)?.to_model()
}
