//! Checkpoint files: safetensors with one little-endian `F32` tensor per
//! parameter or buffer, and string metadata
//! `{format_version, kind, config (JSON), schedule (JSON)}`.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use std::collections::HashMap;
use std::path::Path;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: serde_json::Value,
    pub schedule: serde_json::Value,
}

pub fn save(path: &Path, store: &ParamStore, kind: &str, config: &serde_json::Value) -> Result<()> {
    save_with_schedule(path, store, kind, config, &serde_json::Value::Null)
}

pub fn save_with_schedule(
    path: &Path,
    store: &ParamStore,
    kind: &str,
    config: &serde_json::Value,
    schedule: &serde_json::Value,
) -> Result<()> {
    let mut payload: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in store.named() {
        let t = var.as_tensor().to_dtype(DType::F32)?;
        let bytes: Vec<u8> = t.flatten_all()?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect();
        payload.push((name, t.dims().to_vec(), bytes));
    }
    let views = payload
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = [
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("kind".to_string(), kind.to_string()),
        ("config".to_string(), config.to_string()),
        ("schedule".to_string(), schedule.to_string()),
    ]
    .into_iter()
    .collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(())
}

fn parse_meta(path: &Path, bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata {k}", path.display())));
    let version = field("format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported format version {version}", path.display())));
    }
    Ok(CheckpointMeta {
        kind: field("kind")?,
        config: serde_json::from_str(&field("config")?)?,
        schedule: serde_json::from_str(&field("schedule")?)?,
    })
}

/// Reads only the metadata.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    parse_meta(path, &bytes)
}

/// Loads every tensor into `store`, which must already hold the same names
/// and shapes. Fails when the file's kind differs from `kind`.
pub fn load_into(path: &Path, store: &ParamStore, kind: &str) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = parse_meta(path, &bytes)?;
    if meta.kind != kind {
        return Err(Error::Checkpoint(format!("{}: expected a {kind} checkpoint, found {}", path.display(), meta.kind)));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected: Vec<String> = store.named().into_iter().map(|(n, _)| n).collect();
    if st.len() != expected.len() {
        return Err(Error::Checkpoint(format!("{}: {} tensors, model has {}", path.display(), st.len(), expected.len())));
    }
    for name in expected {
        let view = st.tensor(&name).map_err(|_| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected F32")));
        }
        let data: Vec<f32> = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::from_vec(data, view.shape(), store.device())?;
        store.assign(&name, &t)?;
    }
    Ok(meta)
}
