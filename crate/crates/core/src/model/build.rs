use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, ModelGraph, ModelMeta, ParamKind, ParameterSet, BN_EPS, INPUT_ID};
use crate::error::{Error, Result};
use crate::tensor::{ActivationKind, Padding};

/// U-Net hyper-parameters. `levels` counts encoder levels that end in a
/// max-pool; the network has `levels + 1` filter tiers including the base,
/// so `levels = 5, base_filters = 32` yields tiers 32…1024.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub levels: usize,
    pub base_filters: usize,
}

impl UnetConfig {
    pub fn filters(&self, tier: usize) -> usize {
        self.base_filters << tier
    }
}

fn conv3(filters: usize) -> LayerKind {
    LayerKind::Conv {
        filters,
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
    }
}

/// Builds the encoder–decoder graph with zero-valued parameters and identity
/// batch-norm statistics (gamma 1, var 1). Use [`super::init_weights`] to
/// populate kernels.
pub fn build_unet(
    levels: usize,
    base_filters: usize,
    input_shape: [usize; 3],
    classes: usize,
    af: ActivationKind,
) -> Result<ModelGraph> {
    if levels == 0 {
        return Err(Error::Build("levels must be at least 1".into()));
    }
    if base_filters == 0 || classes == 0 || classes > 256 {
        return Err(Error::Build(format!(
            "base_filters must be positive and classes in 1..=256 (got {base_filters}, {classes})"
        )));
    }
    let [h, w, c] = input_shape;
    let div = 1usize << levels;
    if h == 0 || w == 0 || c == 0 || h % div != 0 || w % div != 0 {
        return Err(Error::Build(format!(
            "input {h}×{w}×{c} must have spatial extents divisible by 2^{levels} = {div}"
        )));
    }
    let cfg = UnetConfig {
        levels,
        base_filters,
    };

    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut channels = c;
    let mut prev = INPUT_ID.to_string();
    let mut skips = Vec::new();

    let conv_block = |prefix: &str,
                          prev: &mut String,
                          channels: &mut usize,
                          filters: usize,
                          layers: &mut Vec<LayerSpec>,
                          params: &mut Vec<ParameterSet>| {
        for j in 1..=2 {
            let conv = format!("{prefix}_conv{j}");
            let bn = format!("{prefix}_bn{j}");
            let act = format!("{prefix}_act{j}");
            layers.push(LayerSpec::new(&conv, conv3(filters), &[prev.as_str()]));
            params.push(ParameterSet::zeros(&conv, ParamKind::ConvKernel, vec![3, 3, *channels, filters]));
            params.push(ParameterSet::zeros(&conv, ParamKind::ConvBias, vec![filters]));
            layers.push(LayerSpec::new(&bn, LayerKind::BatchNorm { eps: BN_EPS }, &[conv.as_str()]));
            params.push(ParameterSet::new(&bn, ParamKind::BnGamma, vec![filters], vec![1.0; filters]));
            params.push(ParameterSet::zeros(&bn, ParamKind::BnBeta, vec![filters]));
            params.push(ParameterSet::zeros(&bn, ParamKind::BnMean, vec![filters]));
            params.push(ParameterSet::new(&bn, ParamKind::BnVar, vec![filters], vec![1.0; filters]));
            layers.push(LayerSpec::new(&act, LayerKind::Activation { activation: af }, &[bn.as_str()]));
            *channels = filters;
            *prev = act;
        }
    };

    for tier in 0..levels {
        let prefix = format!("enc{tier}");
        conv_block(&prefix, &mut prev, &mut channels, cfg.filters(tier), &mut layers, &mut params);
        skips.push((prev.clone(), channels));
        let pool = format!("{prefix}_pool");
        layers.push(LayerSpec::new(&pool, LayerKind::MaxPool, &[prev.as_str()]));
        prev = pool;
    }
    conv_block("base", &mut prev, &mut channels, cfg.filters(levels), &mut layers, &mut params);

    for tier in (0..levels).rev() {
        let prefix = format!("dec{tier}");
        let filters = cfg.filters(tier);
        let up = format!("{prefix}_up");
        layers.push(LayerSpec::new(
            &up,
            LayerKind::ConvTranspose {
                filters,
                kernel: 2,
                stride: 2,
            },
            &[prev.as_str()],
        ));
        params.push(ParameterSet::zeros(&up, ParamKind::ConvKernel, vec![2, 2, channels, filters]));
        params.push(ParameterSet::zeros(&up, ParamKind::ConvBias, vec![filters]));
        let (skip, skip_channels) = &skips[tier];
        let cat = format!("{prefix}_concat");
        layers.push(LayerSpec::new(&cat, LayerKind::Concat, &[skip.as_str(), up.as_str()]));
        prev = cat;
        channels = skip_channels + filters;
        conv_block(&prefix, &mut prev, &mut channels, filters, &mut layers, &mut params);
    }

    layers.push(LayerSpec::new("logits", LayerKind::OutputConv { classes }, &[prev.as_str()]));
    params.push(ParameterSet::zeros("logits", ParamKind::ConvKernel, vec![1, 1, channels, classes]));
    params.push(ParameterSet::zeros("logits", ParamKind::ConvBias, vec![classes]));

    let meta = ModelMeta {
        input_shape,
        classes,
        activation: af,
        unet: Some(cfg),
        folded: false,
    };
    ModelGraph::new(meta, layers, params)
}
