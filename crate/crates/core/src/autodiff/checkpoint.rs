//! Checkpoint layout: `checkpoint.json` (manifest) next to `weights.bin`.
//!
//! The blob is the concatenation of every tensor in manifest order, each
//! stored row-major as little-endian IEEE-754 `f32`. A tensor's
//! `offset` is its byte offset in the blob and `shape` is `[rows, cols]`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, ParameterStore};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "weights.bin";
const FORMAT: &str = "unipre3d-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub blob: String,
    pub step: u64,
    pub learning_rate: f64,
    pub optimizer: AdamConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form model description (the run configuration).
    pub model: serde_json::Value,
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParameterStore,
    step: u64,
    learning_rate: f64,
    optimizer: AdamConfig,
    model: serde_json::Value,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let (r, c) = p.value.dim();
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [r, c],
            offset: blob.len(),
        });
        for &v in p.value.iter() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: 1,
        dtype: "f32".into(),
        byte_order: "little".into(),
        blob: BLOB_FILE.into(),
        step,
        learning_rate,
        optimizer,
        tensors,
        model,
    };
    let blob_path = dir.join(BLOB_FILE);
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    std::fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

/// Reads a checkpoint and returns the manifest with each named tensor.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<(String, Array2<f64>)>)> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&man_path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.dtype != "f32" || manifest.byte_order != "little" {
        return Err(Error::format(&man_path, "unsupported checkpoint format"));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        let end = t.offset + n * 4;
        let bytes = blob
            .get(t.offset..end)
            .ok_or_else(|| Error::format(&blob_path, format!("tensor `{}` runs past the blob", t.name)))?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("shape checked");
        tensors.push((t.name.clone(), arr));
    }
    Ok((manifest, tensors))
}

impl ParameterStore {
    /// Overwrites parameter values by name; every stored parameter must be present.
    pub fn load_values(&mut self, tensors: &[(String, Array2<f64>)]) -> Result<()> {
        for (name, arr) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor `{name}` has no matching parameter")))?;
            let p = self.get_mut(id);
            if p.value.dim() != arr.dim() {
                return Err(Error::dim("load_values", p.value.dim(), arr.dim()));
            }
            p.value.assign(arr);
        }
        if tensors.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.len()
            )));
        }
        Ok(())
    }
}
