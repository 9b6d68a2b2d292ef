//! Layer graph, parameter store and U-Net construction.

mod account;
mod build;
mod exec;
mod fold;
mod init;
pub(crate) mod io;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ActivationKind, Padding};

pub use account::{account_layers, count_params_flops, Accounting};
pub use build::{build_unet, UnetConfig};
pub use exec::{ParamSource, PatchedSet, Trace};
pub use fold::fold_batchnorm;
pub use init::{init_weights, InitScheme};
pub use io::{load_model, save_model, MANIFEST_FILE};

/// Default batch-norm epsilon.
pub const BN_EPS: f32 = 1e-3;

/// Reference to the graph input image.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        eps: f32,
    },
    Activation {
        activation: ActivationKind,
    },
    MaxPool,
    Concat,
    /// 1×1 convolution producing class logits.
    OutputConv {
        classes: usize,
    },
}

impl LayerKind {
    pub fn param_kinds(&self) -> &'static [ParamKind] {
        match self {
            LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } | LayerKind::OutputConv { .. } => {
                &[ParamKind::ConvKernel, ParamKind::ConvBias]
            }
            LayerKind::BatchNorm { .. } => &[
                ParamKind::BnGamma,
                ParamKind::BnBeta,
                ParamKind::BnMean,
                ParamKind::BnVar,
            ],
            _ => &[],
        }
    }

    pub fn is_conv_like(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } | LayerKind::OutputConv { .. }
        )
    }

    /// Output channel count for layers that set it.
    pub fn out_channels(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv { filters, .. } | LayerKind::ConvTranspose { filters, .. } => Some(filters),
            LayerKind::OutputConv { classes } => Some(classes),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::ConvTranspose { .. } => "conv_transpose",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Activation { .. } => "activation",
            LayerKind::MaxPool => "max_pool",
            LayerKind::Concat => "concat",
            LayerKind::OutputConv { .. } => "output_conv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvKernel,
    ConvBias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::ConvKernel => "kernel",
            ParamKind::ConvBias => "bias",
            ParamKind::BnGamma => "gamma",
            ParamKind::BnBeta => "beta",
            ParamKind::BnMean => "mean",
            ParamKind::BnVar => "var",
        }
    }

    pub fn set_id(self, layer: &str) -> String {
        format!("{layer}/{}", self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub id: String,
    pub layer: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl ParameterSet {
    pub fn new(layer: &str, kind: ParamKind, shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            id: kind.set_id(layer),
            layer: layer.to_string(),
            kind,
            shape,
            values,
        }
    }

    pub fn zeros(layer: &str, kind: ParamKind, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(layer, kind, shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Light-weight view of a parameter set for enumeration and fault targeting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSetDescriptor {
    pub id: String,
    pub layer: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// `[H, W, C]` of the input image.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub activation: ActivationKind,
    /// Present for models produced by [`build_unet`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unet: Option<UnetConfig>,
    #[serde(default)]
    pub folded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InputRef {
    Image,
    Layer(usize),
}

/// Immutable layer graph with its parameter store. Mutating operations return
/// new instances.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    meta: ModelMeta,
    layers: Vec<LayerSpec>,
    params: Vec<ParameterSet>,
    by_id: HashMap<String, usize>,
    layer_params: Vec<Vec<usize>>,
    resolved: Vec<Vec<InputRef>>,
    shapes: Vec<[usize; 3]>,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.layers == other.layers
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.id == b.id
                    && a.shape == b.shape
                    && a.values.iter().map(|v| v.to_bits()).eq(b.values.iter().map(|v| v.to_bits()))
            })
    }
}

impl ModelGraph {
    /// Validates the layer list and parameter store and infers every layer's
    /// output shape. Parameter sets may be given in any order; they are stored
    /// in enumeration order (layer order, then kind order).
    pub fn new(meta: ModelMeta, layers: Vec<LayerSpec>, params: Vec<ParameterSet>) -> Result<Self> {
        let mut layer_index: HashMap<&str, usize> = HashMap::new();
        let mut resolved = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            if layer.id == INPUT_ID || layer_index.insert(&layer.id, i).is_some() {
                return Err(Error::Build(format!("duplicate layer id `{}`", layer.id)));
            }
            let arity = match layer.kind {
                LayerKind::Concat => 2,
                _ => 1,
            };
            if layer.inputs.len() != arity {
                return Err(Error::Build(format!(
                    "layer `{}` expects {arity} input(s), got {}",
                    layer.id,
                    layer.inputs.len()
                )));
            }
            let refs = layer
                .inputs
                .iter()
                .map(|src| {
                    if src == INPUT_ID {
                        Ok(InputRef::Image)
                    } else {
                        // Only earlier layers are visible, which keeps the graph acyclic.
                        layer_index
                            .get(src.as_str())
                            .filter(|&&j| j < i)
                            .map(|&j| InputRef::Layer(j))
                            .ok_or_else(|| {
                                Error::Build(format!(
                                    "layer `{}` references unknown or later layer `{src}`",
                                    layer.id
                                ))
                            })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            resolved.push(refs);
        }
        if layers.is_empty() {
            return Err(Error::Build("model has no layers".into()));
        }

        let mut pool: HashMap<String, ParameterSet> = HashMap::new();
        for p in params {
            if !layer_index.contains_key(p.layer.as_str()) {
                return Err(Error::Build(format!("parameter set `{}` has no owning layer", p.id)));
            }
            if p.id != p.kind.set_id(&p.layer) {
                return Err(Error::Build(format!("parameter set id `{}` inconsistent with kind", p.id)));
            }
            if p.values.is_empty() || p.values.len() != p.shape.iter().product::<usize>() {
                return Err(Error::Build(format!("parameter set `{}` has inconsistent extents", p.id)));
            }
            if let Some(prev) = pool.insert(p.id.clone(), p) {
                return Err(Error::Build(format!("duplicate parameter set `{}`", prev.id)));
            }
        }

        let mut ordered = Vec::new();
        let mut layer_params = Vec::with_capacity(layers.len());
        for layer in &layers {
            let mut idx = Vec::new();
            for &kind in layer.kind.param_kinds() {
                let id = kind.set_id(&layer.id);
                let set = pool
                    .remove(&id)
                    .ok_or_else(|| Error::Build(format!("missing parameter set `{id}`")))?;
                idx.push(ordered.len());
                ordered.push(set);
            }
            layer_params.push(idx);
        }
        if let Some(extra) = pool.keys().next() {
            return Err(Error::Build(format!("parameter set `{extra}` does not match its layer kind")));
        }
        let by_id = ordered
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();

        let mut model = Self {
            meta,
            layers,
            params: ordered,
            by_id,
            layer_params,
            resolved,
            shapes: Vec::new(),
        };
        model.shapes = model.infer_shapes()?;
        let last = *model.shapes.last().unwrap();
        let want = [model.meta.input_shape[0], model.meta.input_shape[1], model.meta.classes];
        if last != want {
            return Err(Error::Build(format!(
                "final layer produces {last:?}, expected {want:?}"
            )));
        }
        Ok(model)
    }

    fn infer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        let image = self.meta.input_shape;
        if image.contains(&0) {
            return Err(Error::Build(format!("input shape {image:?} has a zero extent")));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let ins: Vec<[usize; 3]> = self.resolved[i]
                .iter()
                .map(|r| match *r {
                    InputRef::Image => image,
                    InputRef::Layer(j) => shapes[j],
                })
                .collect();
            let [h, w, c] = ins[0];
            let fail = |msg: String| Error::Build(format!("layer `{}`: {msg}", layer.id));
            let params: Vec<&ParameterSet> = self.layer_params[i].iter().map(|&p| &self.params[p]).collect();
            let out = match layer.kind {
                LayerKind::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    check_conv_params(&params, kernel, c, filters).map_err(fail)?;
                    if stride == 0 {
                        return Err(fail("stride must be positive".into()));
                    }
                    let (oh, _) = crate::tensor::conv_axis(h, kernel, stride, padding);
                    let (ow, _) = crate::tensor::conv_axis(w, kernel, stride, padding);
                    if oh == 0 || ow == 0 {
                        return Err(fail(format!("kernel {kernel} larger than input {h}×{w}")));
                    }
                    [oh, ow, filters]
                }
                LayerKind::OutputConv { classes } => {
                    check_conv_params(&params, 1, c, classes).map_err(fail)?;
                    [h, w, classes]
                }
                LayerKind::ConvTranspose {
                    filters,
                    kernel,
                    stride,
                } => {
                    check_conv_params(&params, kernel, c, filters).map_err(fail)?;
                    if stride == 0 {
                        return Err(fail("stride must be positive".into()));
                    }
                    [h * stride, w * stride, filters]
                }
                LayerKind::BatchNorm { .. } => {
                    if params.iter().any(|p| p.shape != [c]) {
                        return Err(fail(format!("batch-norm vectors must have length {c}")));
                    }
                    [h, w, c]
                }
                LayerKind::Activation { .. } => [h, w, c],
                LayerKind::MaxPool => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(fail(format!("max-pool input {h}×{w} has an odd extent")));
                    }
                    [h / 2, w / 2, c]
                }
                LayerKind::Concat => {
                    let [hb, wb, cb] = ins[1];
                    if (h, w) != (hb, wb) {
                        return Err(fail(format!("concat spatial mismatch {h}×{w} vs {hb}×{wb}")));
                    }
                    [h, w, c + cb]
                }
            };
            if out[2] == 0 {
                return Err(fail("layer produces zero channels".into()));
            }
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[ParameterSet] {
        &self.params
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.meta.input_shape
    }

    /// Output shape `[H, W, C]` of every layer, in layer order.
    pub fn layer_shapes(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn param_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn param(&self, id: &str) -> Result<&ParameterSet> {
        self.param_index(id)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::UnknownParamSet(id.to_string()))
    }

    /// Parameter sets owned by layer `layer_idx`, in kind order.
    pub fn layer_param_sets(&self, layer_idx: usize) -> impl Iterator<Item = &ParameterSet> {
        self.layer_params[layer_idx].iter().map(|&i| &self.params[i])
    }

    /// Index of the layer owning parameter set `set_idx`.
    pub fn owner_of(&self, set_idx: usize) -> usize {
        self.layer_params
            .iter()
            .position(|ps| ps.contains(&set_idx))
            .expect("every parameter set has an owner")
    }

    pub(crate) fn resolved_inputs(&self, layer_idx: usize) -> &[InputRef] {
        &self.resolved[layer_idx]
    }

    pub(crate) fn layer_param_indices(&self, layer_idx: usize) -> &[usize] {
        &self.layer_params[layer_idx]
    }

    /// Deterministic descriptor list: layer order, then
    /// kernel, bias, gamma, beta, mean, var within a layer.
    pub fn enumerate_param_sets(&self) -> Vec<ParamSetDescriptor> {
        self.params
            .iter()
            .map(|p| ParamSetDescriptor {
                id: p.id.clone(),
                layer: p.layer.clone(),
                kind: p.kind,
                shape: p.shape.clone(),
                len: p.values.len(),
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Returns a copy with one parameter set's values replaced.
    pub fn with_param_values(&self, id: &str, values: Vec<f32>) -> Result<ModelGraph> {
        let idx = self
            .param_index(id)
            .ok_or_else(|| Error::UnknownParamSet(id.to_string()))?;
        if values.len() != self.params[idx].values.len() {
            return Err(Error::shape("with_param_values", &self.params[idx].shape, &[values.len()]));
        }
        let mut next = self.clone();
        next.params[idx].values = values;
        Ok(next)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [ParameterSet] {
        &mut self.params
    }

    /// SHA-256 over the structure and every parameter bit.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.meta).expect("meta serializes"));
        h.update(serde_json::to_vec(&self.layers).expect("layers serialize"));
        for p in &self.params {
            h.update(p.id.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn check_conv_params(params: &[&ParameterSet], k: usize, cin: usize, cout: usize) -> Result<(), String> {
    let (kernel, bias) = (params[0], params[1]);
    if kernel.shape != [k, k, cin, cout] {
        return Err(format!(
            "kernel shape {:?} does not match expected {:?}",
            kernel.shape,
            [k, k, cin, cout]
        ));
    }
    if bias.shape != [cout] {
        return Err(format!("bias shape {:?} does not match [{cout}]", bias.shape));
    }
    Ok(())
}
