//! Quantized models share the model container layout; blobs hold
//! little-endian integers at each set's width.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{activation_lut, QParams, QuantModel, QuantSet, QuantizedTensor};
use crate::error::{Error, Result};
use crate::model::io::{blob_name, read_blob, read_json, write_json, FORMAT_VERSION};
use crate::model::{LayerKind, LayerSpec, ModelMeta, ParamKind, MANIFEST_FILE};

const FORMAT: &str = "int8";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QManifest {
    version: u32,
    format: String,
    meta: ModelMeta,
    layers: Vec<LayerSpec>,
    input_params: QParams,
    output_params: Vec<QParams>,
    param_sets: Vec<QBlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QBlobEntry {
    id: String,
    layer: String,
    kind: ParamKind,
    shape: Vec<usize>,
    width: u32,
    scale: f32,
    zero_point: i32,
    blob_file: String,
    byte_len: usize,
}

fn encode(t: &QuantizedTensor) -> Vec<u8> {
    match t.width {
        8 => t.q.iter().map(|&q| q as i8 as u8).collect(),
        _ => t.q.iter().flat_map(|q| q.to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], width: u32) -> Vec<i32> {
    match width {
        8 => bytes.iter().map(|&b| b as i8 as i32).collect(),
        _ => bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    }
}

pub fn save_quant_model(qm: &QuantModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(qm.sets.len());
    for s in &qm.sets {
        let blob_file = blob_name(&s.id);
        let bytes = encode(&s.tensor);
        let path = dir.join(&blob_file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(QBlobEntry {
            id: s.id.clone(),
            layer: s.layer.clone(),
            kind: s.kind,
            shape: s.tensor.shape.clone(),
            width: s.tensor.width,
            scale: s.tensor.params.scale,
            zero_point: s.tensor.params.zero_point,
            blob_file,
            byte_len: bytes.len(),
        });
    }
    let manifest = QManifest {
        version: FORMAT_VERSION,
        format: FORMAT.into(),
        meta: qm.meta().clone(),
        layers: qm.layers().to_vec(),
        input_params: qm.input,
        output_params: qm.outputs.clone(),
        param_sets: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_quant_model(dir: impl AsRef<Path>) -> Result<QuantModel> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let m: QManifest = read_json(&manifest_path)?;
    let bad = |msg: String| Error::Manifest {
        path: manifest_path.clone(),
        msg,
    };
    if m.version != FORMAT_VERSION || m.format != FORMAT {
        return Err(bad(format!("unsupported version {} / format `{}`", m.version, m.format)));
    }
    if m.output_params.len() != m.layers.len() {
        return Err(bad("one output parameter pair per layer expected".into()));
    }
    let mut sets = Vec::with_capacity(m.param_sets.len());
    for e in m.param_sets {
        if e.width != 8 && e.width != 32 {
            return Err(bad(format!("set `{}` has width {}", e.id, e.width)));
        }
        let path = dir.join(&e.blob_file);
        let expected = e.shape.iter().product::<usize>() * (e.width as usize / 8);
        let bytes = read_blob(&path, e.byte_len, expected)?;
        if e.id != e.kind.set_id(&e.layer) {
            return Err(bad(format!("set id `{}` does not match its layer and kind", e.id)));
        }
        sets.push(QuantSet {
            id: e.id,
            layer: e.layer,
            kind: e.kind,
            tensor: QuantizedTensor {
                q: decode(&bytes, e.width),
                shape: e.shape,
                params: QParams {
                    scale: e.scale,
                    zero_point: e.zero_point,
                },
                width: e.width,
            },
        });
    }
    let input = m.input_params;
    let luts = m
        .layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Activation { activation } => {
                let src = m.layers.iter().position(|p| p.id == l.inputs[0]);
                let x = src.map_or(input, |j| m.output_params[j]);
                let out = m.output_params[m.layers.iter().position(|p| p.id == l.id).expect("own layer")];
                Some(activation_lut(activation, x, out))
            }
            _ => None,
        })
        .collect();
    QuantModel::assemble(m.meta, m.layers, input, m.output_params, sets, luts)
}
