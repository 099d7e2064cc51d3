//! Checkpoints: a JSON manifest (tensor names, shapes, dtype, model
//! config, vocabulary hash, free-form metadata) next to a flat
//! little-endian payload (manifest stem with a `.bin` extension), tensors
//! laid out in manifest order.
//!
//! f32 payloads are the compact interchange mode; f64 payloads preserve
//! training state bit-exactly and are what resumable training uses.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::numerics::Tensor;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointDtype {
    F32,
    F64,
}

impl CheckpointDtype {
    fn width(&self) -> usize {
        match self {
            CheckpointDtype::F32 => 4,
            CheckpointDtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: CheckpointDtype,
    config: ModelConfig,
    vocab_hash: String,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "diffcap-checkpoint-v1";

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn io_err(path: &Path, e: std::io::Error) -> ModelError {
    ModelError::Checkpoint(format!("{}: {e}", path.display()))
}

/// Write model parameters plus any extra named tensors (optimizer state)
/// and metadata. Extra tensors are distinguished by their name prefix.
pub fn save_checkpoint<S: Real>(
    manifest_path: &Path,
    model: &Model<S>,
    extra_tensors: &BTreeMap<String, Tensor<S>>,
    meta: &BTreeMap<String, serde_json::Value>,
    dtype: CheckpointDtype,
) -> Result<(), ModelError> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut append = |name: &str, tensor: &Tensor<S>| {
        entries.push(TensorEntry {
            name: name.to_owned(),
            shape: tensor.shape().to_vec(),
        });
        match dtype {
            CheckpointDtype::F32 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
                }
            }
            CheckpointDtype::F64 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
                }
            }
        }
    };
    for (name, tensor) in model.params() {
        append(&format!("param/{name}"), tensor);
    }
    for (name, tensor) in extra_tensors {
        append(name, tensor);
    }

    let manifest = Manifest {
        format: FORMAT.to_owned(),
        dtype,
        config: model.config().clone(),
        vocab_hash: model.vocab_hash().to_owned(),
        meta: meta.clone(),
        tensors: entries,
    };
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(manifest_path, body).map_err(|e| io_err(manifest_path, e))?;
    let bin = payload_path(manifest_path);
    fs::write(&bin, payload).map_err(|e| io_err(&bin, e))
}

/// A reloaded checkpoint: the model plus whatever extra tensors and
/// metadata were stored with it.
#[derive(Debug)]
pub struct LoadedCheckpoint<S: Real> {
    pub model: Model<S>,
    pub extra_tensors: BTreeMap<String, Tensor<S>>,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub dtype: CheckpointDtype,
}

/// Load and validate a checkpoint: every parameter the config implies
/// must be present with the implied shape.
pub fn load_checkpoint<S: Real>(manifest_path: &Path) -> Result<LoadedCheckpoint<S>, ModelError> {
    let body = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    let bin = payload_path(manifest_path);
    let payload = fs::read(&bin).map_err(|e| io_err(&bin, e))?;
    let width = manifest.dtype.width();
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * width)
        .sum();
    if payload.len() != expected {
        return Err(ModelError::Checkpoint(format!(
            "payload {} has {} bytes, manifest implies {expected}",
            bin.display(),
            payload.len()
        )));
    }

    let mut params: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    let mut extra_tensors: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    let mut offset = 0usize;
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let bytes = &payload[offset..offset + count * width];
        offset += count * width;
        let data: Vec<S> = match manifest.dtype {
            CheckpointDtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| S::cast(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect(),
            CheckpointDtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| {
                    S::cast(f64::from_le_bytes([
                        b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                    ]))
                })
                .collect(),
        };
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        match entry.name.strip_prefix("param/") {
            Some(param_name) => {
                params.insert(param_name.to_owned(), tensor);
            }
            None => {
                extra_tensors.insert(entry.name.clone(), tensor);
            }
        }
    }

    let model = Model::from_parts(manifest.config, params, manifest.vocab_hash)?;
    Ok(LoadedCheckpoint {
        model,
        extra_tensors,
        meta: manifest.meta,
        dtype: manifest.dtype,
    })
}
