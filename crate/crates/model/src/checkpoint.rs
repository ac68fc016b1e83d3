//! Portable checkpoint container: magic, version, JSON manifest, raw tensors.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::params::ParameterStore;
use crate::transformer::LaneTransformer;
use crate::ModelError;

pub const MAGIC: &[u8; 8] = b"LSEQCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (training step, metrics, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn to_bytes(model: &LaneTransformer, extra: serde_json::Value) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut data: Vec<u8> = Vec::with_capacity(model.store.num_scalars() * 8);
    for (_, p) in model.store.iter() {
        let (r, c) = p.value.dim();
        tensors.push(TensorEntry { name: p.name.clone(), shape: [r, c], dtype: "f64".into(), offset: data.len() as u64 });
        for v in p.value.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { config: model.config.clone(), tensors, extra };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(LaneTransformer, serde_json::Value), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| ModelError::Checkpoint(format!("manifest: {e}")))?;
    let data = &bytes[20 + mlen..];
    let mut store = ParameterStore::new();
    for t in &manifest.tensors {
        if t.dtype != "f64" {
            return Err(ModelError::Checkpoint(format!("tensor {}: unsupported dtype {}", t.name, t.dtype)));
        }
        let n = t.shape[0] * t.shape[1];
        let start = t.offset as usize;
        let raw = data.get(start..start + 8 * n).ok_or_else(|| ModelError::Checkpoint(format!("tensor {} truncated", t.name)))?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), vals).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        store.insert(&t.name, arr)?;
    }
    let model = LaneTransformer::from_store(manifest.config, store)?;
    Ok((model, manifest.extra))
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save(path: &Path, model: &LaneTransformer, extra: serde_json::Value) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| ModelError::Io(format!("{}: {e}", tmp.display())))?;
    f.write_all(&to_bytes(model, extra)).map_err(|e| ModelError::Io(format!("{}: {e}", tmp.display())))?;
    f.sync_all().map_err(|e| ModelError::Io(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<(LaneTransformer, serde_json::Value), ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}
