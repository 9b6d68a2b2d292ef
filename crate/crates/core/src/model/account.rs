use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, ModelGraph, INPUT_ID};
use crate::error::{Error, Result};
use crate::tensor::conv_axis;

/// Parameter and FLOP totals for one input shape.
///
/// FLOPs count 2 per multiply-accumulate in convolutions, 2 per element for
/// batch norm, 1 per element for activations and 3 comparisons per max-pool
/// output. Concatenation is free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub params: u64,
    pub flops: u64,
    pub conv_flops: u64,
}

/// Accounts a layer list from its attributes alone, so per-layer channel
/// counts can be varied without materializing weights.
pub fn account_layers(layers: &[LayerSpec], input_shape: [usize; 3]) -> Result<Accounting> {
    let mut shapes: HashMap<&str, [usize; 3]> = HashMap::new();
    shapes.insert(INPUT_ID, input_shape);
    let mut acc = Accounting {
        params: 0,
        flops: 0,
        conv_flops: 0,
    };
    for layer in layers {
        let lookup = |k: usize| {
            layer
                .inputs
                .get(k)
                .and_then(|id| shapes.get(id.as_str()).copied())
                .ok_or_else(|| Error::Build(format!("layer `{}` has unresolved input", layer.id)))
        };
        let [h, w, c] = lookup(0)?;
        let (h64, w64, c64) = (h as u64, w as u64, c as u64);
        let out = match layer.kind {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (oh, _) = conv_axis(h, kernel, stride, padding);
                let (ow, _) = conv_axis(w, kernel, stride, padding);
                let (f, k) = (filters as u64, kernel as u64);
                acc.params += k * k * c64 * f + f;
                let macs = oh as u64 * ow as u64 * f * k * k * c64;
                acc.conv_flops += 2 * macs;
                [oh, ow, filters]
            }
            LayerKind::OutputConv { classes } => {
                let f = classes as u64;
                acc.params += c64 * f + f;
                acc.conv_flops += 2 * h64 * w64 * c64 * f;
                [h, w, classes]
            }
            LayerKind::ConvTranspose {
                filters,
                kernel,
                stride,
            } => {
                let (f, k) = (filters as u64, kernel as u64);
                acc.params += k * k * c64 * f + f;
                acc.conv_flops += 2 * h64 * w64 * c64 * k * k * f;
                [h * stride, w * stride, filters]
            }
            LayerKind::BatchNorm { .. } => {
                acc.params += 4 * c64;
                acc.flops += 2 * h64 * w64 * c64;
                [h, w, c]
            }
            LayerKind::Activation { .. } => {
                acc.flops += h64 * w64 * c64;
                [h, w, c]
            }
            LayerKind::MaxPool => {
                acc.flops += 3 * (h64 / 2) * (w64 / 2) * c64;
                [h / 2, w / 2, c]
            }
            LayerKind::Concat => {
                let [_, _, cb] = lookup(1)?;
                [h, w, c + cb]
            }
        };
        shapes.insert(&layer.id, out);
    }
    acc.flops += acc.conv_flops;
    Ok(acc)
}

/// Parameters and FLOPs of `model` evaluated at `input_shape`, whose channel
/// count must match the model's and whose extents must survive every pool.
pub fn count_params_flops(model: &ModelGraph, input_shape: [usize; 3]) -> Result<Accounting> {
    if input_shape[2] != model.input_shape()[2] {
        return Err(Error::shape("count_params_flops", &input_shape, &model.input_shape()));
    }
    let pools = model
        .layers()
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::MaxPool))
        .count();
    let div = 1usize << pools;
    if !input_shape[0].is_multiple_of(div) || !input_shape[1].is_multiple_of(div) {
        return Err(Error::InvalidArgument(format!(
            "input {input_shape:?} not divisible by {div}"
        )));
    }
    account_layers(model.layers(), input_shape)
}

#[cfg(test)]
mod tests {
    use super::super::{build_unet, ModelMeta, ParamKind, ParameterSet};
    use super::*;
    use crate::tensor::{ActivationKind, Padding};

    #[test]
    fn single_conv_arithmetic() {
        let meta = ModelMeta {
            input_shape: [5, 5, 1],
            classes: 2,
            activation: ActivationKind::Relu,
            unet: None,
            folded: false,
        };
        let layers = vec![LayerSpec::new(
            "c",
            LayerKind::Conv {
                filters: 2,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
            &[INPUT_ID],
        )];
        let params = vec![
            ParameterSet::zeros("c", ParamKind::ConvKernel, vec![3, 3, 1, 2]),
            ParameterSet::zeros("c", ParamKind::ConvBias, vec![2]),
        ];
        let m = ModelGraph::new(meta, layers, params).unwrap();
        let a = count_params_flops(&m, [5, 5, 1]).unwrap();
        assert_eq!(a.params, 20);
        assert_eq!(a.flops, 2 * 25 * 2 * 9);
    }

    #[test]
    fn params_agree_with_parameter_store() {
        for (levels, base) in [(1, 1), (2, 3), (3, 8)] {
            let m = build_unet(levels, base, [16, 16, 4], 5, ActivationKind::Relu).unwrap();
            let a = count_params_flops(&m, [16, 16, 4]).unwrap();
            assert_eq!(a.params as usize, m.param_count());
        }
    }

    #[test]
    fn doubling_extents_quadruples_flops() {
        let m = build_unet(3, 8, [32, 32, 4], 5, ActivationKind::Relu).unwrap();
        let a = count_params_flops(&m, [32, 32, 4]).unwrap();
        let b = count_params_flops(&m, [64, 64, 4]).unwrap();
        assert_eq!(b.conv_flops, 4 * a.conv_flops);
        assert_eq!(b.flops, 4 * a.flops);
        assert_eq!(a.params, b.params);
        assert!(count_params_flops(&m, [36, 32, 4]).is_err());
    }
}
