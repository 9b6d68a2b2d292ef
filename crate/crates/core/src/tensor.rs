//! Dense fp32 tensors and the reference inference kernels.
//!
//! Activations use an `H × W × C` layout (batch of one). Convolution kernels
//! are `Kh × Kw × Cin × Cout`, for both regular and transposed convolution.
//! Every kernel accumulates in a fixed order so results are bit-reproducible:
//! kernel row, then kernel column, then input channel, with the bias added
//! last.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ClassMap;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(Error::contract(
                "tensor",
                format!(
                    "shape {shape:?} implies {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as an `H × W × C` activation.
    pub fn hwc(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok([h, w, c]),
            other => Err(Error::contract(
                "tensor",
                format!("expected rank-3 H×W×C tensor, got shape {other:?}"),
            )),
        }
    }

    pub fn at(&self, h: usize, w: usize, c: usize) -> f32 {
        let [_, width, ch] = [self.shape[0], self.shape[1], self.shape[2]];
        self.data[(h * width + w) * ch + c]
    }

    /// Bit patterns of every element, for exact comparisons that treat NaN
    /// payloads as values.
    pub fn bits(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    HardSigmoid,
}

impl ActivationKind {
    /// Whether the activation's range is bounded to `[0, 1]`.
    pub fn is_bounded(self) -> bool {
        !matches!(self, ActivationKind::Relu)
    }

    pub fn apply(self, v: f32) -> f32 {
        match self {
            // f32::max would swallow NaN; faults must propagate.
            ActivationKind::Relu => {
                if v.is_nan() || v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            ActivationKind::HardSigmoid => (0.2 * v + 0.5).clamp(0.0, 1.0),
        }
    }

    /// Same function evaluated in f64; used for quantization lookup tables.
    pub fn apply_f64(self, v: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if v.is_nan() || v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            ActivationKind::HardSigmoid => (0.2 * v + 0.5).clamp(0.0, 1.0),
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::HardSigmoid => "hard_sigmoid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub(crate) fn conv_axis(extent: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            if extent < k {
                (0, 0)
            } else {
                ((extent - k) / stride + 1, 0)
            }
        }
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(extent);
            (out, total / 2)
        }
    }
}

/// Kernel geometry `[kh, kw, cin, cout]` from a rank-4 shape.
fn kernel_dims(op: &'static str, kernel: &Tensor) -> Result<[usize; 4]> {
    match kernel.shape() {
        &[kh, kw, ci, co] => Ok([kh, kw, ci, co]),
        other => Err(Error::contract(
            op,
            format!("kernel must be rank 4 (Kh×Kw×Cin×Cout), got {other:?}"),
        )),
    }
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let [h, w, c] = input.hwc()?;
    let kd = kernel_dims(OP, kernel)?;
    if kd[2] != c || bias.len() != kd[3] {
        return Err(Error::shape(OP, input.shape(), kernel.shape()));
    }
    if stride == 0 {
        return Err(Error::contract(OP, "stride must be positive"));
    }
    let (oh, _) = conv_axis(h, kd[0], stride, padding);
    let (ow, _) = conv_axis(w, kd[1], stride, padding);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(OP, input.shape(), kernel.shape()));
    }
    Ok(conv2d_raw(input, kernel.data(), kd, bias, stride, padding))
}

/// Unchecked convolution over a raw kernel slice. Positions that fall in the
/// padding contribute nothing to the accumulator.
pub(crate) fn conv2d_raw(
    input: &Tensor,
    kernel: &[f32],
    [kh, kw, cin, cout]: [usize; 4],
    bias: &[f32],
    stride: usize,
    padding: Padding,
) -> Tensor {
    let [h, w, _] = [input.shape[0], input.shape[1], input.shape[2]];
    let (oh, pad_h) = conv_axis(h, kh, stride, padding);
    let (ow, pad_w) = conv_axis(w, kw, stride, padding);
    let x = input.data();
    let mut out = vec![0.0f32; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * cout..][..cout];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_h as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &xv) in px.iter().enumerate() {
                        let krow = &kernel[kbase + ci * cout..][..cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
            for (a, &b) in acc.iter_mut().zip(bias) {
                *a += b;
            }
        }
    }
    Tensor {
        shape: vec![oh, ow, cout],
        data: out,
    }
}

pub fn conv2d_transpose(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d_transpose";
    input.hwc()?;
    let kd = kernel_dims(OP, kernel)?;
    if kd[2] != input.shape[2] || bias.len() != kd[3] {
        return Err(Error::shape(OP, input.shape(), kernel.shape()));
    }
    if stride == 0 {
        return Err(Error::contract(OP, "stride must be positive"));
    }
    Ok(conv2d_transpose_raw(input, kernel.data(), kd, bias, stride))
}

/// Transposed convolution producing `H·stride × W·stride` outputs. Written
/// as a gather so each output sums its contributions in (ky, kx, ci) order;
/// taps that land past the output extent are dropped.
pub(crate) fn conv2d_transpose_raw(
    input: &Tensor,
    kernel: &[f32],
    [kh, kw, cin, cout]: [usize; 4],
    bias: &[f32],
    stride: usize,
) -> Tensor {
    let [h, w] = [input.shape[0], input.shape[1]];
    let (oh, ow) = (h * stride, w * stride);
    let x = input.data();
    let mut out = vec![0.0f32; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * cout..][..cout];
            for ky in 0..kh.min(oy + 1) {
                let ty = oy - ky;
                if ty % stride != 0 || ty / stride >= h {
                    continue;
                }
                let iy = ty / stride;
                for kx in 0..kw.min(ox + 1) {
                    let tx = ox - kx;
                    if tx % stride != 0 || tx / stride >= w {
                        continue;
                    }
                    let ix = tx / stride;
                    let px = &x[(iy * w + ix) * cin..][..cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &xv) in px.iter().enumerate() {
                        let krow = &kernel[kbase + ci * cout..][..cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
            for (a, &b) in acc.iter_mut().zip(bias) {
                *a += b;
            }
        }
    }
    Tensor {
        shape: vec![oh, ow, cout],
        data: out,
    }
}

/// 2×2 max pooling with stride 2. The window is scanned row-major and an
/// element replaces the running maximum only if it compares greater, so a
/// NaN never displaces a value.
pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    let [h, w, _] = input.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(
            "maxpool2d",
            format!("spatial extents must be even, got {h}×{w}"),
        ));
    }
    Ok(maxpool2d_raw(input))
}

pub(crate) fn maxpool2d_raw(input: &Tensor) -> Tensor {
    let [h, w, c] = [input.shape[0], input.shape[1], input.shape[2]];
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = input.at(2 * oy, 2 * ox, ch);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = input.at(2 * oy + dy, 2 * ox + dx, ch);
                    if v > best {
                        best = v;
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor {
        shape: vec![oh, ow, c],
        data: out,
    }
}

pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    const OP: &str = "batchnorm_infer";
    let [_, _, c] = x.hwc()?;
    for v in [gamma, beta, mean, var] {
        if v.len() != c {
            return Err(Error::shape(OP, x.shape(), &[v.len()]));
        }
    }
    if let Some(i) = var.iter().position(|&v| v < 0.0) {
        return Err(Error::contract(
            OP,
            format!("negative variance {} at channel {i}", var[i]),
        ));
    }
    Ok(batchnorm_raw(x, gamma, beta, mean, var, eps))
}

/// Inference batch norm evaluated per element in f64 and rounded once.
/// No validation: injected faults may legitimately make `var` negative.
pub(crate) fn batchnorm_raw(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Tensor {
    let c = x.shape[2];
    let inv: Vec<f64> = var
        .iter()
        .map(|&v| 1.0 / (v as f64 + eps as f64).sqrt())
        .collect();
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            (gamma[ch] as f64 * (v as f64 - mean[ch] as f64) * inv[ch] + beta[ch] as f64) as f32
        })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub fn apply_activation(x: &Tensor, kind: ActivationKind) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ha, wa, ca] = a.hwc()?;
    let [hb, wb, cb] = b.hwc()?;
    if ha != hb || wa != wb {
        return Err(Error::shape("concat_channels", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(ha * wa * (ca + cb));
    for p in 0..ha * wa {
        data.extend_from_slice(&a.data[p * ca..(p + 1) * ca]);
        data.extend_from_slice(&b.data[p * cb..(p + 1) * cb]);
    }
    Ok(Tensor {
        shape: vec![ha, wa, ca + cb],
        data,
    })
}

/// Per-pixel argmax over channels. Scans channels in order and moves to a
/// later channel only if it compares strictly greater: ties go to the lowest
/// index and NaN never wins.
pub fn argmax_channels(logits: &Tensor) -> Result<ClassMap> {
    let [h, w, c] = logits.hwc()?;
    if c == 0 {
        return Err(Error::contract("argmax_channels", "need at least one channel"));
    }
    let labels = logits
        .data
        .chunks_exact(c)
        .map(|px| argmax_slice(px, |a, b| a > b) as u8)
        .collect();
    ClassMap::new(h, w, c, labels)
}

pub(crate) fn argmax_slice<T: Copy>(values: &[T], greater: impl Fn(T, T) -> bool) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if greater(v, values[best]) {
            best = i;
        }
    }
    best
}
