//! Checkpoint directory: `manifest.json` plus a little-endian f32 blob.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ckl_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::{Architecture, ModelState};
use crate::error::{CklError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
    pub frozen: BTreeMap<String, bool>,
    pub has_theta0: bool,
    /// θ0 tensors, stored after the parameters in the same blob.
    #[serde(default)]
    pub theta0: Vec<TensorEntry>,
    /// Free-form provenance (world directory, seed, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn write_tensors<'a>(
    tensors: impl Iterator<Item = (&'a String, &'a Tensor)>,
    blob: &mut Vec<u8>,
) -> Vec<TensorEntry> {
    tensors
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            };
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entry
        })
        .collect()
}

pub fn save_checkpoint(model: &ModelState, dir: &Path, meta: BTreeMap<String, serde_json::Value>) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| CklError::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    let tensors = write_tensors(model.params().iter(), &mut blob);
    let theta0 = model
        .theta0()
        .map(|t| write_tensors(t.iter(), &mut blob))
        .unwrap_or_default();
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION,
        architecture: model.arch().clone(),
        tensors,
        frozen: model.names().map(|n| (n.to_string(), model.is_frozen(n))).collect(),
        has_theta0: model.theta0().is_some(),
        theta0,
        meta,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| CklError::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CklError::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| CklError::io(&manifest_path, e))?;
    Ok(manifest)
}

fn read_tensors(entries: &[TensorEntry], blob: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let bytes = blob
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| CklError::Checkpoint(format!("{} runs past the blob end", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok((e.name.clone(), Tensor::new(&e.shape, data)?))
        })
        .collect()
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, CheckpointManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| CklError::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| CklError::json(&manifest_path, e))?;
    if manifest.format != FORMAT_VERSION {
        return Err(CklError::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| CklError::io(&blob_path, e))?;
    let params = read_tensors(&manifest.tensors, &blob)?;
    let theta0 = if manifest.has_theta0 {
        Some(read_tensors(&manifest.theta0, &blob)?)
    } else {
        None
    };
    let frozen: BTreeSet<String> = manifest
        .frozen
        .iter()
        .filter(|(_, &f)| f)
        .map(|(n, _)| n.clone())
        .collect();
    let model = ModelState::from_parts(manifest.architecture.clone(), params, frozen, theta0)?;
    Ok((model, manifest))
}
