//! Per-tensor post-training quantization and integer inference.
//!
//! A real value is represented as `r = S·(q − Z)`. Weights are symmetric
//! int8 (`Z = 0`), biases int32 with `S_b = S_w·S_x`, activations asymmetric
//! int8 calibrated from fp32 min/max.

mod exec;
mod io;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerSpec, ModelGraph, ModelMeta, ParamKind, ParameterSet};
use crate::tensor::{ActivationKind, Tensor};

pub use exec::{quant_forward, QActivation, QForward, QParamSource, QPatchedSet, QTrace};
pub use io::{load_quant_model, save_quant_model};

/// Width used when a calibrated or weight range collapses to zero.
pub const RANGE_EPS: f32 = 1e-6;

/// Output parameters of bounded activations: `[0, 1)` onto the full int8
/// range, placing 0.5 exactly at `q = 0`.
pub const BOUNDED_OUTPUT: QParams = QParams {
    scale: 1.0 / 256.0,
    zero_point: -128,
};

fn qrange(width: u32) -> Result<(i64, i64)> {
    match width {
        8 => Ok((i8::MIN as i64, i8::MAX as i64)),
        32 => Ok((i32::MIN as i64, i32::MAX as i64)),
        _ => Err(Error::InvalidArgument(format!("quantization width {width} is not 8 or 32"))),
    }
}

/// Scale and zero-point of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QParams {
    /// Symmetric parameters: `S = max|r| / qmax`, `Z = 0`.
    pub fn symmetric(max_abs: f32, width: u32) -> Result<Self> {
        let (_, qmax) = qrange(width)?;
        if !max_abs.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite range bound {max_abs}")));
        }
        let m = if max_abs == 0.0 { RANGE_EPS } else { max_abs.abs() };
        Ok(Self {
            scale: (m as f64 / qmax as f64) as f32,
            zero_point: 0,
        })
    }

    /// Asymmetric int8 parameters over `[lo, hi]` widened to contain 0:
    /// `S = (hi − lo)/255`, `Z = round(−lo/S) − 128`.
    pub fn asymmetric(lo: f32, hi: f32) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidArgument(format!("invalid range [{lo}, {hi}]")));
        }
        let lo = lo.min(0.0);
        let mut hi = hi.max(0.0);
        if hi - lo <= 0.0 {
            hi = lo + RANGE_EPS;
        }
        let scale = ((hi as f64 - lo as f64) / 255.0) as f32;
        let zero_point = ((-lo as f64 / scale as f64).round_ties_even() as i64 - 128).clamp(-128, 127) as i32;
        Ok(Self { scale, zero_point })
    }

    pub fn quantize(&self, r: f32, width: u32) -> Result<i32> {
        let (lo, hi) = qrange(width)?;
        Ok(quantize_value(r, *self, lo, hi))
    }

    pub fn dequantize(&self, q: i32) -> f32 {
        (self.scale as f64 * (q as i64 - self.zero_point as i64) as f64) as f32
    }
}

fn quantize_value(r: f32, p: QParams, lo: i64, hi: i64) -> i32 {
    let v = (r as f64 / p.scale as f64).round_ties_even();
    // Saturating float-to-int cast maps NaN to 0.
    (v as i64).saturating_add(p.zero_point as i64).clamp(lo, hi) as i32
}

/// Integer payload with its scale, zero-point and storage width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub q: Vec<i32>,
    pub params: QParams,
    pub width: u32,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn scale(&self) -> f32 {
        self.params.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.params.zero_point
    }
}

/// Quantizes `t` per tensor. `range` defaults to the tensor's own min/max.
/// Symmetric quantization works at width 8 or 32; asymmetric only at 8.
pub fn quantize_tensor(
    t: &Tensor,
    width: u32,
    symmetric: bool,
    range: Option<(f32, f32)>,
) -> Result<QuantizedTensor> {
    let (lo, hi) = match range {
        Some(r) => r,
        None => finite_range(t.data())?,
    };
    let params = if symmetric {
        QParams::symmetric(lo.abs().max(hi.abs()), width)?
    } else {
        if width != 8 {
            return Err(Error::InvalidArgument("asymmetric quantization is int8 only".into()));
        }
        QParams::asymmetric(lo, hi)?
    };
    quantize_with(t, params, width)
}

/// Quantizes `t` with given parameters.
pub fn quantize_with(t: &Tensor, params: QParams, width: u32) -> Result<QuantizedTensor> {
    if params.scale <= 0.0 || !params.scale.is_finite() {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {}", params.scale)));
    }
    let (lo, hi) = qrange(width)?;
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        q: t.data().iter().map(|&r| quantize_value(r, params, lo, hi)).collect(),
        params,
        width,
    })
}

pub fn dequantize(qt: &QuantizedTensor) -> Tensor {
    let data = qt.q.iter().map(|&q| qt.params.dequantize(q)).collect();
    Tensor::new(qt.shape.clone(), data).expect("shape matches payload")
}

fn finite_range(values: &[f32]) -> Result<(f32, f32)> {
    if values.is_empty() {
        return Err(Error::Empty("tensor"));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("cannot quantize non-finite value {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Observed `[min, max]` of one activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActRange {
    pub min: f32,
    pub max: f32,
}

impl ActRange {
    fn empty() -> Self {
        Self {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
        }
    }

    fn observe(&mut self, values: &[f32]) {
        for &v in values {
            if v.is_finite() {
                self.min = self.min.min(v);
                self.max = self.max.max(v);
            }
        }
    }

    fn or_zero(self) -> Self {
        if self.min > self.max {
            Self { min: 0.0, max: 0.0 }
        } else {
            self
        }
    }
}

/// Activation ranges of the input image and of every layer output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub input: ActRange,
    pub layers: Vec<ActRange>,
}

/// Running min/max of every activation over fp32 forward passes.
pub fn calibrate(model: &ModelGraph, images: &[Tensor]) -> Result<Calibration> {
    if images.is_empty() {
        return Err(Error::Empty("calibration images"));
    }
    let mut input = ActRange::empty();
    let mut layers = vec![ActRange::empty(); model.layers().len()];
    for x in images {
        let trace = model.trace(x)?;
        input.observe(x.data());
        for (r, out) in layers.iter_mut().zip(&trace.outputs) {
            r.observe(out.data());
        }
    }
    Ok(Calibration {
        input: input.or_zero(),
        layers: layers.into_iter().map(ActRange::or_zero).collect(),
    })
}

/// One quantized parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSet {
    pub id: String,
    pub layer: String,
    pub kind: ParamKind,
    pub tensor: QuantizedTensor,
}

/// An int8 model: the folded graph plus integer parameters, activation
/// quantization parameters and activation lookup tables.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    /// Folded graph whose parameters hold the dequantized values; used for
    /// structure and shape bookkeeping.
    graph: ModelGraph,
    input: QParams,
    outputs: Vec<QParams>,
    sets: Vec<QuantSet>,
    luts: Vec<Option<Vec<i8>>>,
}

/// Maps every int8 input code through `af` into the output code space.
pub fn activation_lut(af: ActivationKind, input: QParams, output: QParams) -> Vec<i8> {
    (i8::MIN as i32..=i8::MAX as i32)
        .map(|q| {
            let r = input.scale as f64 * (q - input.zero_point) as f64;
            let y = af.apply_f64(r);
            ((y / output.scale as f64).round_ties_even() as i64 + output.zero_point as i64).clamp(-128, 127) as i8
        })
        .collect()
}

fn output_params(layers: &[LayerSpec], graph: &ModelGraph, calib: &Calibration) -> Result<Vec<QParams>> {
    let mut outputs: Vec<QParams> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let r = calib.layers[i];
        let p = match layer.kind {
            LayerKind::Activation { activation } if activation.is_bounded() => BOUNDED_OUTPUT,
            LayerKind::MaxPool => {
                let src = &layer.inputs[0];
                match graph.layer_index(src) {
                    Some(j) => outputs[j],
                    None => graph_input_params(calib)?,
                }
            }
            _ => QParams::asymmetric(r.min, r.max)?,
        };
        outputs.push(p);
    }
    Ok(outputs)
}

fn graph_input_params(calib: &Calibration) -> Result<QParams> {
    QParams::asymmetric(calib.input.min, calib.input.max)
}

/// Quantizes a batch-norm-folded model: weights symmetric int8 per tensor,
/// biases int32 at `S_w·S_x`, activations from `calib`.
pub fn quantize_model(folded: &ModelGraph, calib: &Calibration) -> Result<QuantModel> {
    if let Some(bn) = folded
        .layers()
        .iter()
        .find(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
    {
        return Err(Error::contract(
            "quantize_model",
            format!("batch norm `{}` must be folded first", bn.id),
        ));
    }
    if calib.layers.len() != folded.layers().len() {
        return Err(Error::contract("quantize_model", "calibration does not match the model"));
    }
    let layers = folded.layers();
    let input = graph_input_params(calib)?;
    let outputs = output_params(layers, folded, calib)?;
    let in_params = |layer: &LayerSpec, k: usize| -> QParams {
        match folded.layer_index(&layer.inputs[k]) {
            Some(j) => outputs[j],
            None => input,
        }
    };

    let mut sets = Vec::with_capacity(folded.params().len());
    let mut luts = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let x = in_params(layer, 0);
        let owned: Vec<&ParameterSet> = folded.layer_param_sets(i).collect();
        if layer.kind.is_conv_like() {
            let (k, b) = (owned[0], owned[1]);
            let kt = Tensor::new(k.shape.clone(), k.values.clone())?;
            let wq = quantize_tensor(&kt, 8, true, None)?;
            let bias_params = QParams {
                scale: wq.params.scale * x.scale,
                zero_point: 0,
            };
            let bt = Tensor::new(b.shape.clone(), b.values.clone())?;
            finite_range(bt.data())?;
            let bq = quantize_with(&bt, bias_params, 32)?;
            sets.push(QuantSet {
                id: k.id.clone(),
                layer: k.layer.clone(),
                kind: k.kind,
                tensor: wq,
            });
            sets.push(QuantSet {
                id: b.id.clone(),
                layer: b.layer.clone(),
                kind: b.kind,
                tensor: bq,
            });
        }
        luts.push(match layer.kind {
            LayerKind::Activation { activation } => Some(activation_lut(activation, x, outputs[i])),
            _ => None,
        });
    }
    QuantModel::assemble(folded.meta().clone(), layers.to_vec(), input, outputs, sets, luts)
}

impl QuantModel {
    fn assemble(
        meta: ModelMeta,
        layers: Vec<LayerSpec>,
        input: QParams,
        outputs: Vec<QParams>,
        sets: Vec<QuantSet>,
        luts: Vec<Option<Vec<i8>>>,
    ) -> Result<Self> {
        let params = sets
            .iter()
            .map(|s| ParameterSet::new(&s.layer, s.kind, s.tensor.shape.clone(), dequantize(&s.tensor).into_data()))
            .collect();
        let graph = ModelGraph::new(meta, layers, params)?;
        if graph.params().iter().map(|p| &p.id).ne(sets.iter().map(|s| &s.id)) {
            return Err(Error::Build("quantized sets are not in enumeration order".into()));
        }
        let qm = Self {
            graph,
            input,
            outputs,
            sets,
            luts,
        };
        qm.check_bias_coupling()?;
        Ok(qm)
    }

    fn check_bias_coupling(&self) -> Result<()> {
        for (i, layer) in self.graph.layers().iter().enumerate() {
            if !layer.kind.is_conv_like() {
                continue;
            }
            let idx = self.graph.layer_param_indices(i);
            let (w, b) = (&self.sets[idx[0]].tensor, &self.sets[idx[1]].tensor);
            let x = self.input_params_of(i, 0);
            if b.params.scale != w.params.scale * x.scale || b.params.zero_point != 0 || w.params.zero_point != 0 {
                return Err(Error::Build(format!("layer `{}` breaks the bias scale coupling", layer.id)));
            }
            if w.width != 8 || b.width != 32 {
                return Err(Error::Build(format!("layer `{}` has unexpected integer widths", layer.id)));
            }
        }
        Ok(())
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn meta(&self) -> &ModelMeta {
        self.graph.meta()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        self.graph.layers()
    }

    pub fn sets(&self) -> &[QuantSet] {
        &self.sets
    }

    pub fn set(&self, id: &str) -> Result<&QuantSet> {
        self.graph
            .param_index(id)
            .map(|i| &self.sets[i])
            .ok_or_else(|| Error::UnknownParamSet(id.to_string()))
    }

    pub fn input_params(&self) -> QParams {
        self.input
    }

    /// Quantization parameters of every layer's output.
    pub fn output_params(&self) -> &[QParams] {
        &self.outputs
    }

    /// Parameters of input `k` of layer `layer_idx`.
    pub fn input_params_of(&self, layer_idx: usize, k: usize) -> QParams {
        match self.graph.resolved_inputs(layer_idx)[k] {
            crate::model::InputRef::Image => self.input,
            crate::model::InputRef::Layer(j) => self.outputs[j],
        }
    }

    pub fn lut(&self, layer_idx: usize) -> Option<&[i8]> {
        self.luts[layer_idx].as_deref()
    }

    pub(crate) fn sets_mut(&mut self) -> &mut [QuantSet] {
        &mut self.sets
    }

    /// SHA-256 over the structure, quantization parameters and integer
    /// payloads.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"int8");
        h.update(serde_json::to_vec(self.graph.meta()).expect("meta serializes"));
        h.update(serde_json::to_vec(self.graph.layers()).expect("layers serialize"));
        h.update(serde_json::to_vec(&self.input).expect("params serialize"));
        h.update(serde_json::to_vec(&self.outputs).expect("params serialize"));
        for s in &self.sets {
            h.update(s.id.as_bytes());
            h.update(s.tensor.params.scale.to_le_bytes());
            h.update(s.tensor.params.zero_point.to_le_bytes());
            h.update(s.tensor.width.to_le_bytes());
            for q in &s.tensor.q {
                h.update(q.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_unet, fold_batchnorm, init_weights, InitScheme};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scheme_examples() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap();
        let q = quantize_tensor(&t, 8, true, None).unwrap();
        assert_eq!(q.params.scale, 1.0 / 127.0);
        assert_eq!(q.params.zero_point, 0);
        assert_eq!(q.q, [-127, 0, 127]);
        let zero = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let qz = quantize_tensor(&zero, 8, true, None).unwrap();
        assert!(qz.params.scale > 0.0);
        assert_eq!(qz.q, [0, 0]);
        let qa = quantize_tensor(&zero, 8, false, None).unwrap();
        assert!(qa.params.scale > 0.0);
        assert_eq!(dequantize(&qa).data(), [0.0, 0.0]);
    }

    #[test]
    fn asymmetric_examples() {
        let p = QParams::asymmetric(0.0, 2.55).unwrap();
        assert_eq!(p.zero_point, -128);
        assert_eq!(p.dequantize(p.zero_point), 0.0);
        let p = QParams::asymmetric(-1.0, 1.0).unwrap();
        assert_eq!(p.dequantize(p.zero_point), 0.0);
        // Ranges not containing zero are widened to include it.
        let p = QParams::asymmetric(2.0, 3.0).unwrap();
        assert_eq!(p.zero_point, -128);
        assert!(QParams::asymmetric(1.0, 0.0).is_err());
        assert!(QParams::asymmetric(f32::NAN, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn error_within_half_step(values in prop::collection::vec(-50.0f32..50.0, 1..64), sym in any::<bool>()) {
            let t = Tensor::new(vec![values.len()], values.clone()).unwrap();
            let q = quantize_tensor(&t, 8, sym, None).unwrap();
            let s = q.params.scale as f64;
            for (&r, &qv) in values.iter().zip(&q.q) {
                let back = s * (qv - q.params.zero_point) as f64;
                prop_assert!((back - r as f64).abs() <= s / 2.0 * (1.0 + 1e-9), "{} vs {}", back, r);
            }
        }

        #[test]
        fn requantizing_dequantized_is_fixed_point(values in prop::collection::vec(-3.0f32..3.0, 1..32)) {
            let t = Tensor::new(vec![values.len()], values).unwrap();
            let q = quantize_tensor(&t, 8, false, None).unwrap();
            let d = dequantize(&q);
            let q2 = quantize_with(&d, q.params, 8).unwrap();
            prop_assert_eq!(&q2.q, &q.q);
        }

        #[test]
        fn dequantize_is_affine(a in -128i32..128, b in -128i32..128, z in -128i32..128) {
            let p = QParams { scale: 0.0625, zero_point: z };
            prop_assert_eq!(p.dequantize(a) - p.dequantize(b), 0.0625 * (a - b) as f32);
        }
    }

    #[test]
    fn bounded_luts_are_monotone_and_centered() {
        let input = QParams::asymmetric(-4.0, 4.0).unwrap();
        for af in [ActivationKind::Sigmoid, ActivationKind::HardSigmoid] {
            let lut = activation_lut(af, input, BOUNDED_OUTPUT);
            assert!(lut.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(lut[(input.zero_point + 128) as usize], 0, "{af}");
        }
    }

    fn images(shape: [usize; 3], n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect()
    }

    fn folded(af: ActivationKind) -> ModelGraph {
        fold_batchnorm(&init_weights(&build_unet(2, 2, [8, 8, 2], 3, af).unwrap(), 3, InitScheme::He)).unwrap()
    }

    #[test]
    fn calibration_ranges_widen_with_more_images() {
        let m = folded(ActivationKind::Sigmoid);
        let xs = images([8, 8, 2], 4, 1);
        let one = calibrate(&m, &xs[..1]).unwrap();
        let all = calibrate(&m, &xs).unwrap();
        for (a, b) in one.layers.iter().zip(&all.layers) {
            assert!(b.min <= a.min && b.max >= a.max);
        }
        // Running min/max oracle.
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for x in &xs {
            let t = m.trace(x).unwrap();
            for v in t.outputs[0].data() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        assert_eq!((all.layers[0].min, all.layers[0].max), (lo, hi));
        let act = m.layers().iter().position(|l| matches!(l.kind, LayerKind::Activation { .. })).unwrap();
        assert!(all.layers[act].min >= 0.0 && all.layers[act].max <= 1.0);
        assert!(calibrate(&m, &[]).is_err());
    }

    #[test]
    fn model_quantization_invariants() {
        let m = folded(ActivationKind::Relu);
        let calib = calibrate(&m, &images([8, 8, 2], 2, 5)).unwrap();
        let qm = quantize_model(&m, &calib).unwrap();
        for s in qm.sets() {
            match s.kind {
                ParamKind::ConvKernel => assert_eq!((s.tensor.width, s.tensor.params.zero_point), (8, 0)),
                _ => assert_eq!((s.tensor.width, s.tensor.params.zero_point), (32, 0)),
            }
        }
        qm.check_bias_coupling().unwrap();
        let unfolded = init_weights(&build_unet(1, 1, [4, 4, 1], 2, ActivationKind::Relu).unwrap(), 1, InitScheme::He);
        let c = calibrate(&unfolded, &images([4, 4, 1], 1, 0)).unwrap();
        assert!(matches!(quantize_model(&unfolded, &c), Err(Error::Contract { .. })));
    }
}
