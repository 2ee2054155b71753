//! Checkpoint files: a JSON manifest naming each tensor with its shape and byte
//! offset, next to a raw little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT: &str = "plaindet-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `manifest` (JSON) and the blob alongside it with a `.bin` extension.
pub fn save<'a, T: Scalar>(
    manifest: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    meta: serde_json::Value,
) -> Result<()> {
    let blob = blob_path(manifest);
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for &x in t.data() {
            bytes.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    let m = Manifest {
        format: FORMAT.into(),
        version: 1,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
        meta,
    };
    if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::json(manifest, e))?;
    fs::write(manifest, text).map_err(|e| Error::io(manifest, e))
}

/// Reads a checkpoint back as `(name, tensor)` pairs in manifest order.
pub fn load<T: Scalar>(manifest: &Path) -> Result<(Vec<(String, Tensor<T>)>, serde_json::Value)> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest, e))?;
    if m.format != FORMAT {
        return Err(Error::Config(format!("{}: not a checkpoint manifest", manifest.display())));
    }
    let blob = manifest.with_file_name(&m.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut out = Vec::with_capacity(m.entries.len());
    for e in m.entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        if end > bytes.len() {
            return Err(Error::Config(format!("{}: entry {} overruns blob", manifest.display(), e.name)));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok((out, m.meta))
}
