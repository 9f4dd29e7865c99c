use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

/// One tensor inside the raw blob: little-endian f32 values starting at
/// byte `offset`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Writes every parameter value into `blob` and returns the manifest.
pub fn save_params(store: &ParamStore<f32>, blob: &Path) -> Result<Vec<ManifestEntry>, TensorError> {
    let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
    let mut manifest = Vec::with_capacity(store.len());
    for (_, name, p) in store.iter() {
        manifest.push(ManifestEntry { name: name.to_string(), shape: p.value.shape().to_vec(), offset: bytes.len() });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(blob, bytes)?;
    Ok(manifest)
}

pub fn load_params(manifest: &[ManifestEntry], blob: &Path) -> Result<ParamStore<f32>, TensorError> {
    let bytes = fs::read(blob)?;
    let mut store = ParamStore::new();
    for e in manifest {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let raw = bytes.get(e.offset..end).ok_or_else(|| {
            TensorError::Checkpoint(format!("{} needs bytes {}..{end}, blob has {}", e.name, e.offset, bytes.len()))
        })?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.insert(&e.name, Tensor::new(&e.shape, data)?)?;
    }
    Ok(store)
}
