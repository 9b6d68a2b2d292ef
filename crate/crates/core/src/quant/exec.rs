//! Integer inference: `acc = Σ q_w·q_x − Z_x·Σ q_w + q_b` over valid taps,
//! requantized by `M = S_w·S_x / S_y`.

use std::borrow::Cow;

use super::{QParams, QuantModel};
use crate::error::{Error, Result};
use crate::fault::{flip_bit_int, Domain, FaultSpec, FaultTarget, UndoToken};
use crate::metrics::ClassMap;
use crate::model::{InputRef, LayerKind};
use crate::tensor::{argmax_slice, conv_axis, Padding, Tensor};

/// An int8 activation tensor in `H × W × C` layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QActivation {
    pub shape: [usize; 3],
    pub q: Vec<i8>,
}

/// Supplies integer parameter payloads by set index.
pub trait QParamSource {
    fn set_q(&self, set_idx: usize) -> &[i32];
}

impl QParamSource for QuantModel {
    fn set_q(&self, set_idx: usize) -> &[i32] {
        &self.sets[set_idx].tensor.q
    }
}

/// A private copy of one quantized set layered over a shared model.
#[derive(Debug, Clone)]
pub struct QPatchedSet<'a> {
    base: &'a QuantModel,
    set_idx: usize,
    q: Vec<i32>,
}

impl<'a> QPatchedSet<'a> {
    pub fn new(base: &'a QuantModel, set_id: &str) -> Result<Self> {
        let set_idx = base
            .graph
            .param_index(set_id)
            .ok_or_else(|| Error::UnknownParamSet(set_id.to_string()))?;
        Ok(Self {
            base,
            set_idx,
            q: base.sets[set_idx].tensor.q.clone(),
        })
    }

    pub fn set_id(&self) -> &str {
        &self.base.sets[self.set_idx].id
    }

    pub fn q(&self) -> &[i32] {
        &self.q
    }
}

impl QParamSource for QPatchedSet<'_> {
    fn set_q(&self, set_idx: usize) -> &[i32] {
        if set_idx == self.set_idx {
            &self.q
        } else {
            &self.base.sets[set_idx].tensor.q
        }
    }
}

fn domain_of(width: u32) -> Domain {
    if width == 8 {
        Domain::I8
    } else {
        Domain::I32
    }
}

fn flip_slot(q: &mut [i32], width: u32, spec: &FaultSpec) -> Result<UndoToken> {
    let domain = domain_of(width);
    if spec.domain != domain {
        return Err(Error::InvalidArgument(format!(
            "set `{}` holds {domain} values, fault targets {}",
            spec.param_set, spec.domain
        )));
    }
    if spec.element >= q.len() {
        return Err(Error::IndexOutOfBounds {
            set: spec.param_set.clone(),
            index: spec.element,
            len: q.len(),
        });
    }
    let mask = if width == 8 { 0xff } else { u32::MAX };
    let original = q[spec.element];
    let flipped = flip_bit_int(original, spec.bit, width)?;
    q[spec.element] = flipped;
    Ok(UndoToken {
        param_set: spec.param_set.clone(),
        element: spec.element,
        domain,
        original_bits: original as u32 & mask,
        new_bits: flipped as u32 & mask,
    })
}

fn restore_slot(q: &mut [i32], width: u32, token: &UndoToken) -> Result<()> {
    if token.element >= q.len() {
        return Err(Error::IndexOutOfBounds {
            set: token.param_set.clone(),
            index: token.element,
            len: q.len(),
        });
    }
    q[token.element] = if width == 8 {
        token.original_bits as u8 as i8 as i32
    } else {
        token.original_bits as i32
    };
    Ok(())
}

impl FaultTarget for QuantModel {
    fn apply_fault(&mut self, spec: &FaultSpec) -> Result<UndoToken> {
        let idx = self
            .graph
            .param_index(&spec.param_set)
            .ok_or_else(|| Error::UnknownParamSet(spec.param_set.clone()))?;
        let t = &mut self.sets_mut()[idx].tensor;
        flip_slot(&mut t.q, t.width, spec)
    }

    fn undo(&mut self, token: UndoToken) -> Result<()> {
        let idx = self
            .graph
            .param_index(&token.param_set)
            .ok_or_else(|| Error::UnknownParamSet(token.param_set.clone()))?;
        let t = &mut self.sets_mut()[idx].tensor;
        restore_slot(&mut t.q, t.width, &token)
    }
}

impl FaultTarget for QPatchedSet<'_> {
    fn apply_fault(&mut self, spec: &FaultSpec) -> Result<UndoToken> {
        if spec.param_set != self.set_id() {
            return Err(Error::UnknownParamSet(spec.param_set.clone()));
        }
        let width = self.base.sets[self.set_idx].tensor.width;
        flip_slot(&mut self.q, width, spec)
    }

    fn undo(&mut self, token: UndoToken) -> Result<()> {
        if token.param_set != self.set_id() {
            return Err(Error::UnknownParamSet(token.param_set.clone()));
        }
        let width = self.base.sets[self.set_idx].tensor.width;
        restore_slot(&mut self.q, width, &token)
    }
}

/// Integer outputs of every layer for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTrace {
    pub input: QActivation,
    pub outputs: Vec<QActivation>,
    /// Whether any accumulator left the int32 range.
    pub saturated: bool,
}

impl QTrace {
    pub fn logits(&self) -> &QActivation {
        self.outputs.last().expect("model has at least one layer")
    }
}

/// Result of an integer forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QForward {
    pub classes: ClassMap,
    pub trace: QTrace,
}

fn requantize(acc: i64, multiplier: f64, out: QParams) -> i8 {
    ((multiplier * acc as f64).round_ties_even() as i64 + out.zero_point as i64).clamp(-128, 127) as i8
}

/// Saturates an accumulator to int32, reporting whether it had to.
fn saturate(acc: i64) -> (i64, bool) {
    let s = acc.clamp(i32::MIN as i64, i32::MAX as i64);
    (s, s != acc)
}

pub(crate) struct ConvGeom {
    pub kernel: [usize; 4],
    pub stride: usize,
    pub padding: Padding,
    pub transpose: bool,
}

/// Integer convolution (direct or transposed) followed by requantization.
/// Taps follow the same order and validity rules as the fp32 kernels.
#[allow(clippy::too_many_arguments)]
pub(crate) fn qconv(
    x: &QActivation,
    zx: i32,
    kernel: &[i32],
    bias: &[i32],
    geom: &ConvGeom,
    multiplier: f64,
    out: QParams,
    saturated: &mut bool,
) -> QActivation {
    let [h, w, cin] = x.shape;
    let [kh, kw, _, cout] = geom.kernel;
    let s = geom.stride;
    let (oh, ow, pad_h, pad_w) = if geom.transpose {
        (h * s, w * s, 0, 0)
    } else {
        let (oh, ph) = conv_axis(h, kh, s, geom.padding);
        let (ow, pw) = conv_axis(w, kw, s, geom.padding);
        (oh, ow, ph, pw)
    };
    let mut q = Vec::with_capacity(oh * ow * cout);
    let mut acc = vec![0i64; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.fill(0);
            let tap = |iy: usize, ix: usize, ky: usize, kx: usize, acc: &mut [i64]| {
                let px = &x.q[(iy * w + ix) * cin..][..cin];
                let kbase = (ky * kw + kx) * cin * cout;
                for (ci, &xv) in px.iter().enumerate() {
                    let xc = xv as i64 - zx as i64;
                    let krow = &kernel[kbase + ci * cout..][..cout];
                    for (a, &kv) in acc.iter_mut().zip(krow) {
                        *a += kv as i64 * xc;
                    }
                }
            };
            if geom.transpose {
                for ky in 0..kh.min(oy + 1) {
                    let ty = oy - ky;
                    if ty % s != 0 || ty / s >= h {
                        continue;
                    }
                    for kx in 0..kw.min(ox + 1) {
                        let tx = ox - kx;
                        if tx % s != 0 || tx / s >= w {
                            continue;
                        }
                        tap(ty / s, tx / s, ky, kx, &mut acc);
                    }
                }
            } else {
                for ky in 0..kh {
                    let iy = (oy * s + ky) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * s + kx) as isize - pad_w as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        tap(iy as usize, ix as usize, ky, kx, &mut acc);
                    }
                }
            }
            for (a, &b) in acc.iter().zip(bias) {
                let (sat, hit) = saturate(a + b as i64);
                *saturated |= hit;
                q.push(requantize(sat, multiplier, out));
            }
        }
    }
    QActivation {
        shape: [oh, ow, cout],
        q,
    }
}

fn qmaxpool(x: &QActivation) -> QActivation {
    let [h, w, c] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let at = |y: usize, xx: usize, ch: usize| x.q[(y * w + xx) * c + ch];
    let mut q = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = at(2 * oy, 2 * ox, ch);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    best = best.max(at(2 * oy + dy, 2 * ox + dx, ch));
                }
                q.push(best);
            }
        }
    }
    QActivation {
        shape: [oh, ow, c],
        q,
    }
}

fn rescale(v: i8, from: QParams, to: QParams) -> i8 {
    if from == to {
        return v;
    }
    let r = from.scale as f64 * (v as i64 - from.zero_point as i64) as f64;
    ((r / to.scale as f64).round_ties_even() as i64 + to.zero_point as i64).clamp(-128, 127) as i8
}

fn qconcat(a: &QActivation, pa: QParams, b: &QActivation, pb: QParams, out: QParams) -> QActivation {
    let [h, w, ca] = a.shape;
    let cb = b.shape[2];
    let mut q = Vec::with_capacity(h * w * (ca + cb));
    for p in 0..h * w {
        q.extend(a.q[p * ca..(p + 1) * ca].iter().map(|&v| rescale(v, pa, out)));
        q.extend(b.q[p * cb..(p + 1) * cb].iter().map(|&v| rescale(v, pb, out)));
    }
    QActivation {
        shape: [h, w, ca + cb],
        q,
    }
}

impl QuantModel {
    /// Quantizes an fp32 image with the input parameters.
    pub fn quantize_input(&self, image: &Tensor) -> Result<QActivation> {
        if image.shape() != self.meta().input_shape {
            return Err(Error::shape("quant_forward", image.shape(), &self.meta().input_shape));
        }
        let p = self.input;
        Ok(QActivation {
            shape: self.meta().input_shape,
            q: image
                .data()
                .iter()
                .map(|&r| super::quantize_value(r, p, -128, 127) as i8)
                .collect(),
        })
    }

    fn eval_layer(&self, i: usize, inputs: &[&QActivation], src: &impl QParamSource, saturated: &mut bool) -> QActivation {
        let layer = &self.graph.layers()[i];
        let x = inputs[0];
        let px = self.input_params_of(i, 0);
        let out = self.outputs[i];
        let cin = x.shape[2];
        let conv = |filters: usize, k: usize, stride: usize, padding: Padding, transpose: bool, saturated: &mut bool| {
            let idx = self.graph.layer_param_indices(i);
            let sb = self.sets[idx[1]].tensor.params.scale;
            let multiplier = sb as f64 / out.scale as f64;
            qconv(
                x,
                px.zero_point,
                src.set_q(idx[0]),
                src.set_q(idx[1]),
                &ConvGeom {
                    kernel: [k, k, cin, filters],
                    stride,
                    padding,
                    transpose,
                },
                multiplier,
                out,
                saturated,
            )
        };
        match layer.kind {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding,
            } => conv(filters, kernel, stride, padding, false, saturated),
            LayerKind::OutputConv { classes } => conv(classes, 1, 1, Padding::Valid, false, saturated),
            LayerKind::ConvTranspose {
                filters,
                kernel,
                stride,
            } => conv(filters, kernel, stride, Padding::Valid, true, saturated),
            LayerKind::Activation { .. } => {
                let lut = self.luts[i].as_ref().expect("activation layers carry a table");
                QActivation {
                    shape: x.shape,
                    q: x.q.iter().map(|&v| lut[(v as i32 + 128) as usize]).collect(),
                }
            }
            LayerKind::MaxPool => qmaxpool(x),
            LayerKind::Concat => qconcat(x, px, inputs[1], self.input_params_of(i, 1), out),
            LayerKind::BatchNorm { .. } => unreachable!("quantized models are folded"),
        }
    }

    fn run(&self, input: QActivation, src: &impl QParamSource) -> QTrace {
        let mut outputs: Vec<QActivation> = Vec::with_capacity(self.graph.layers().len());
        let mut saturated = false;
        for i in 0..self.graph.layers().len() {
            let y = {
                let ins: Vec<&QActivation> = self
                    .graph
                    .resolved_inputs(i)
                    .iter()
                    .map(|r| match *r {
                        InputRef::Image => &input,
                        InputRef::Layer(j) => &outputs[j],
                    })
                    .collect();
                self.eval_layer(i, &ins, src, &mut saturated)
            };
            outputs.push(y);
        }
        QTrace {
            input,
            outputs,
            saturated,
        }
    }

    pub fn trace(&self, image: &Tensor) -> Result<QTrace> {
        Ok(self.run(self.quantize_input(image)?, self))
    }

    pub fn trace_with(&self, image: &Tensor, src: &impl QParamSource) -> Result<QTrace> {
        Ok(self.run(self.quantize_input(image)?, src))
    }

    /// Re-executes only layers downstream of the patched set. Returns the
    /// class map and whether any recomputed accumulator saturated.
    pub fn forward_patched(&self, golden: &QTrace, patch: &QPatchedSet<'_>) -> (ClassMap, bool) {
        let n = self.graph.layers().len();
        let first = self.graph.owner_of(patch.set_idx);
        let mut dirty = vec![false; n];
        dirty[first] = true;
        let mut saturated = false;
        let mut outputs: Vec<Cow<'_, QActivation>> = golden.outputs[..first].iter().map(Cow::Borrowed).collect();
        for i in first..n {
            if i != first {
                dirty[i] = self
                    .graph
                    .resolved_inputs(i)
                    .iter()
                    .any(|r| matches!(*r, InputRef::Layer(j) if dirty[j]));
            }
            if !dirty[i] {
                outputs.push(Cow::Borrowed(&golden.outputs[i]));
                continue;
            }
            let y = {
                let ins: Vec<&QActivation> = self
                    .graph
                    .resolved_inputs(i)
                    .iter()
                    .map(|r| match *r {
                        InputRef::Image => &golden.input,
                        InputRef::Layer(j) => outputs[j].as_ref(),
                    })
                    .collect();
                self.eval_layer(i, &ins, patch, &mut saturated)
            };
            outputs.push(Cow::Owned(y));
        }
        (
            class_map(outputs.last().expect("non-empty model"), self.meta().classes),
            saturated,
        )
    }
}

fn class_map(logits: &QActivation, classes: usize) -> ClassMap {
    let [h, w, c] = logits.shape;
    let labels = logits.q.chunks_exact(c).map(|px| argmax_slice(px, |a, b| a > b) as u8).collect();
    ClassMap::new(h, w, classes, labels).expect("logit channels equal class count")
}

/// Integer forward pass: argmax over the int8 logits, plus every layer's
/// output and the saturation flag.
pub fn quant_forward(qm: &QuantModel, image: &Tensor) -> Result<QForward> {
    let trace = qm.trace(image)?;
    let classes = class_map(trace.logits(), qm.meta().classes);
    Ok(QForward { classes, trace })
}

#[cfg(test)]
mod tests {
    use super::super::{calibrate, dequantize, quantize_model, quantize_tensor, quantize_with, QuantizedTensor};
    use super::*;
    use crate::model::{build_unet, fold_batchnorm, init_weights, InitScheme};
    use crate::tensor::{conv2d, conv2d_transpose, ActivationKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(shape: [usize; 3], n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect()
    }

    fn qmodel(af: ActivationKind, seed: u64) -> (QuantModel, Vec<Tensor>) {
        let m = fold_batchnorm(&init_weights(&build_unet(2, 2, [8, 8, 2], 3, af).unwrap(), seed, InitScheme::He)).unwrap();
        let xs = images([8, 8, 2], 3, seed + 1);
        let c = calibrate(&m, &xs).unwrap();
        (quantize_model(&m, &c).unwrap(), xs)
    }

    fn to_tensor(a: &QActivation, p: QParams) -> Tensor {
        dequantize(&QuantizedTensor {
            shape: a.shape.to_vec(),
            q: a.q.iter().map(|&v| v as i32).collect(),
            params: p,
            width: 8,
        })
    }

    // Float-path oracle: dequantize operands, run the fp32 kernel in f64-safe
    // f32, requantize with the output parameters.
    fn oracle(
        x: &QActivation,
        px: QParams,
        k: &QuantizedTensor,
        b: &QuantizedTensor,
        geom: &ConvGeom,
        out: QParams,
    ) -> Vec<i8> {
        let xt = to_tensor(x, px);
        let kt = dequantize(k);
        let bt = dequantize(b);
        let y = if geom.transpose {
            conv2d_transpose(&xt, &kt, bt.data(), geom.stride).unwrap()
        } else {
            conv2d(&xt, &kt, bt.data(), geom.stride, geom.padding).unwrap()
        };
        quantize_with(&y, out, 8).unwrap().q.iter().map(|&v| v as i8).collect()
    }

    #[test]
    fn random_layers_match_float_oracle_within_one_lsb() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..60 {
            let (h, w) = (rng.random_range(3..7usize), rng.random_range(3..7usize));
            let (cin, cout) = (rng.random_range(1..5usize), rng.random_range(1..5usize));
            let transpose = case % 3 == 2;
            let k = if transpose { 2 } else { [1, 3][rng.random_range(0..2usize)] };
            let stride = if transpose { 2 } else { rng.random_range(1..3usize) };
            let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
            let geom = ConvGeom {
                kernel: [k, k, cin, cout],
                stride,
                padding,
                transpose,
            };
            let px = QParams::asymmetric(rng.random_range(-2.0..0.0), rng.random_range(0.0..2.0)).unwrap();
            let x = QActivation {
                shape: [h, w, cin],
                q: (0..h * w * cin).map(|_| rng.random_range(-128..=127i32) as i8).collect(),
            };
            let kt = Tensor::new(vec![k, k, cin, cout], (0..k * k * cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let kq = quantize_tensor(&kt, 8, true, None).unwrap();
            let bt = Tensor::new(vec![cout], (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let bp = QParams {
                scale: kq.params.scale * px.scale,
                zero_point: 0,
            };
            let bq = quantize_with(&bt, bp, 32).unwrap();
            let out = QParams::asymmetric(-4.0, 4.0).unwrap();
            let mut sat = false;
            let got = qconv(&x, px.zero_point, &kq.q, &bq.q, &geom, bp.scale as f64 / out.scale as f64, out, &mut sat);
            assert!(!sat);
            let want = oracle(&x, px, &kq, &bq, &geom, out);
            for (a, b) in got.q.iter().zip(&want) {
                assert!((*a as i32 - *b as i32).abs() <= 1, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_image_yields_requantized_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = QActivation {
            shape: [3, 3, 2],
            q: vec![0; 18],
        };
        let kq: Vec<i32> = (0..36).map(|_| rng.random_range(-127..=127)).collect();
        let bq = vec![1000, -2500];
        let out = QParams { scale: 0.05, zero_point: 3 };
        let geom = ConvGeom {
            kernel: [3, 3, 2, 2],
            stride: 1,
            padding: Padding::Same,
            transpose: false,
        };
        let m = 0.0001 / 0.05;
        let mut sat = false;
        let y = qconv(&x, 0, &kq, &bq, &geom, m, out, &mut sat);
        for px in y.q.chunks(2) {
            assert_eq!(px[0] as i64, (m * 1000.0f64).round_ties_even() as i64 + 3);
            assert_eq!(px[1] as i64, (m * -2500.0f64).round_ties_even() as i64 + 3);
        }
    }

    #[test]
    fn saturation_is_flagged_not_fatal() {
        let x = QActivation {
            shape: [1, 1, 1],
            q: vec![127],
        };
        let geom = ConvGeom {
            kernel: [1, 1, 1, 1],
            stride: 1,
            padding: Padding::Valid,
            transpose: false,
        };
        let out = QParams { scale: 1.0, zero_point: 0 };
        let mut sat = false;
        let y = qconv(&x, -128, &[127], &[i32::MAX], &geom, 1e-9, out, &mut sat);
        assert!(sat);
        assert_eq!(y.q, [2]);
    }

    #[test]
    fn forward_is_deterministic_and_close_to_fp32() {
        let (qm, xs) = qmodel(ActivationKind::Sigmoid, 4);
        let a = quant_forward(&qm, &xs[0]).unwrap();
        assert_eq!(a, quant_forward(&qm, &xs[0]).unwrap());
        assert!(!a.trace.saturated);
        assert!(quant_forward(&qm, &images([8, 4, 2], 1, 0)[0]).is_err());
        // Dequantized logits should track the fp32 logits of the model the
        // quantized graph was derived from.
        let fp = qm.graph().forward(&xs[0]).unwrap().0;
        let deq = to_tensor(a.trace.logits(), *qm.output_params().last().unwrap());
        let s = qm.output_params().last().unwrap().scale;
        let spread = fp.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let worst = fp.data().iter().zip(deq.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.25 * spread + s, "worst {worst}, spread {spread}");
    }

    #[test]
    fn bounded_activation_outputs_use_fixed_params() {
        let (qm, xs) = qmodel(ActivationKind::HardSigmoid, 9);
        let t = qm.trace(&xs[0]).unwrap();
        for (i, l) in qm.layers().iter().enumerate() {
            if matches!(l.kind, LayerKind::Activation { .. }) {
                assert_eq!(qm.output_params()[i], super::super::BOUNDED_OUTPUT);
                let d = to_tensor(&t.outputs[i], qm.output_params()[i]);
                assert!(d.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn patched_forward_equals_full_rerun() {
        let (qm, xs) = qmodel(ActivationKind::Relu, 2);
        let golden = qm.trace(&xs[0]).unwrap();
        for (set, bit) in [("enc0_conv1/kernel", 7), ("base_conv2/bias", 30), ("logits/bias", 31), ("dec1_up/kernel", 6)] {
            let mut patch = QPatchedSet::new(&qm, set).unwrap();
            let domain = if set.ends_with("kernel") { Domain::I8 } else { Domain::I32 };
            let tok = patch
                .apply_fault(&FaultSpec {
                    param_set: set.into(),
                    element: 0,
                    bit,
                    domain,
                })
                .unwrap();
            assert_ne!(tok.original_bits, tok.new_bits);
            let (fast, fast_sat) = qm.forward_patched(&golden, &patch);
            let full = qm.trace_with(&xs[0], &patch).unwrap();
            assert_eq!(fast, class_map(full.logits(), 3), "{set}");
            assert_eq!(fast_sat, full.saturated, "{set}");
        }
    }

    #[test]
    fn apply_undo_on_quant_model() {
        let (qm, _) = qmodel(ActivationKind::Relu, 1);
        let mut m = qm.clone();
        let before = qm.fingerprint();
        for (set, bit, domain) in [("enc0_conv1/kernel", 7, Domain::I8), ("logits/bias", 31, Domain::I32)] {
            let spec = FaultSpec {
                param_set: set.into(),
                element: 1,
                bit,
                domain,
            };
            let tok = m.apply_fault(&spec).unwrap();
            assert_ne!(m.fingerprint(), before);
            m.undo(tok).unwrap();
            assert_eq!(m.fingerprint(), before);
        }
        let wrong = FaultSpec {
            param_set: "logits/bias".into(),
            element: 0,
            bit: 3,
            domain: Domain::I8,
        };
        assert!(m.apply_fault(&wrong).is_err());
    }
}
