//! Checkpoints: a JSON manifest of `(name, shape, dtype, offset)` entries and
//! one little-endian binary blob.

use std::fs;
use std::path::Path;

use evseg_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const FORMAT: &str = "evseg-checkpoint";
pub const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub nbytes: u64,
}

impl ManifestEntry {
    pub fn numel(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Manifest {
    /// Layout of `store` in name order.
    pub fn describe(store: &ParamStore) -> Self {
        let mut offset = 0;
        let entries = store
            .iter()
            .map(|(name, t)| {
                let nbytes = (t.len() * 8) as u64;
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: DTYPE.to_string(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        Manifest {
            format: FORMAT.to_string(),
            version: 1,
            blob: BLOB_FILE.to_string(),
            entries,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.entries.iter().map(ManifestEntry::numel).sum()
    }
}

pub fn save(dir: &Path, store: &ParamStore, metadata: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::describe(store);
    manifest.metadata = metadata;
    let mut blob = Vec::with_capacity(manifest.entries.iter().map(|e| e.nbytes as usize).sum());
    for (_, t) in store.iter() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man_path, json).map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!(
            "{}: unknown checkpoint format {:?}",
            path.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(ParamStore, Manifest)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        if e.dtype != DTYPE {
            return Err(Error::Data(format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
        }
        let (start, len) = (e.offset as usize, e.nbytes as usize);
        if e.nbytes != e.numel() * 8 || start.checked_add(len).is_none_or(|end| end > blob.len()) {
            return Err(Error::Data(format!(
                "{}: entry {}+{} bytes does not fit a {}-byte blob for shape {:?}",
                e.name,
                e.offset,
                e.nbytes,
                blob.len(),
                e.shape
            )));
        }
        let data = blob[start..start + len]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
    }
    Ok((store, manifest))
}
