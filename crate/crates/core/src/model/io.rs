//! Model directory container: `manifest.json` plus one little-endian blob
//! per parameter set.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelGraph, ModelMeta, ParamKind, ParameterSet};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub(crate) const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    meta: ModelMeta,
    layers: Vec<LayerSpec>,
    param_sets: Vec<BlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    id: String,
    layer: String,
    kind: ParamKind,
    shape: Vec<usize>,
    blob_file: String,
    byte_len: usize,
}

pub(crate) fn blob_name(set_id: &str) -> String {
    format!("{}.bin", set_id.replace('/', "."))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads a blob and checks it against the manifest: `declared` must equal
/// `expected` (shape-derived) and the file must hold exactly that many bytes.
pub(crate) fn read_blob(path: &Path, declared: usize, expected: usize) -> Result<Vec<u8>> {
    if declared != expected {
        return Err(Error::ExtentMismatch {
            path: path.to_path_buf(),
            declared,
            expected,
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != declared {
        return Err(Error::TruncatedBlob {
            path: path.to_path_buf(),
            expected: declared,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

pub(crate) fn f32_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn save_model(model: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(model.params().len());
    for p in model.params() {
        let blob_file = blob_name(&p.id);
        let bytes = f32_to_le(&p.values);
        let path = dir.join(&blob_file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(BlobEntry {
            id: p.id.clone(),
            layer: p.layer.clone(),
            kind: p.kind,
            shape: p.shape.clone(),
            blob_file,
            byte_len: bytes.len(),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        meta: model.meta().clone(),
        layers: model.layers().to_vec(),
        param_sets: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Manifest {
            path: manifest_path,
            msg: format!("unsupported version {}", manifest.version),
        });
    }
    let mut params = Vec::with_capacity(manifest.param_sets.len());
    for e in manifest.param_sets {
        let path: PathBuf = dir.join(&e.blob_file);
        let expected = e.shape.iter().product::<usize>() * 4;
        let bytes = read_blob(&path, e.byte_len, expected)?;
        let set = ParameterSet::new(&e.layer, e.kind, e.shape, f32_from_le(&bytes));
        if set.id != e.id {
            return Err(Error::Manifest {
                path: manifest_path,
                msg: format!("set id `{}` does not match layer/kind `{}`", e.id, set.id),
            });
        }
        params.push(set);
    }
    ModelGraph::new(manifest.meta, manifest.layers, params)
}
