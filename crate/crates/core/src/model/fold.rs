use super::{LayerKind, LayerSpec, ModelGraph, ModelMeta, ParamKind, ParameterSet};
use crate::error::{Error, Result};

/// Absorbs every inference batch norm into the convolution feeding it:
/// `k' = k·γ/√(σ²+ε)` per output channel and `b' = (b−μ)·γ/√(σ²+ε) + β`,
/// computed in f64 and rounded once. Consumers of a batch norm are rewired to
/// the convolution.
pub fn fold_batchnorm(model: &ModelGraph) -> Result<ModelGraph> {
    let layers = model.layers();
    let mut rename: Vec<(String, String)> = Vec::new();
    let mut kept: Vec<LayerSpec> = Vec::with_capacity(layers.len());
    let mut params: Vec<ParameterSet> = Vec::with_capacity(model.params().len());

    // Conv layers whose output is read by something other than its BN would
    // change meaning after folding.
    let consumers = |id: &str| layers.iter().filter(|l| l.inputs.iter().any(|i| i == id)).count();

    for (i, layer) in layers.iter().enumerate() {
        match layer.kind {
            LayerKind::BatchNorm { eps } => {
                let src = &layer.inputs[0];
                let conv_idx = model
                    .layer_index(src)
                    .filter(|&j| layers[j].kind.is_conv_like())
                    .ok_or_else(|| {
                        Error::Build(format!("batch norm `{}` does not follow a convolution", layer.id))
                    })?;
                if consumers(src) != 1 {
                    return Err(Error::Build(format!(
                        "convolution `{src}` feeds layers other than batch norm `{}`",
                        layer.id
                    )));
                }
                let bn: Vec<&[f32]> = model.layer_param_sets(i).map(|p| p.values.as_slice()).collect();
                let (gamma, beta, mean, var) = (bn[0], bn[1], bn[2], bn[3]);
                let scale: Vec<f64> = gamma
                    .iter()
                    .zip(var)
                    .map(|(&g, &v)| g as f64 / (v as f64 + eps as f64).sqrt())
                    .collect();
                let conv_id = &layers[conv_idx].id;
                let kpos = params
                    .iter()
                    .position(|p| p.id == ParamKind::ConvKernel.set_id(conv_id))
                    .expect("conv precedes its batch norm");
                let kernel = &mut params[kpos];
                let cout = *kernel.shape.last().unwrap();
                for (j, v) in kernel.values.iter_mut().enumerate() {
                    *v = (*v as f64 * scale[j % cout]) as f32;
                }
                let bias = &mut params[kpos + 1];
                for (c, b) in bias.values.iter_mut().enumerate() {
                    *b = ((*b as f64 - mean[c] as f64) * scale[c] + beta[c] as f64) as f32;
                }
                rename.push((layer.id.clone(), conv_id.clone()));
            }
            _ => {
                let mut spec = layer.clone();
                for input in &mut spec.inputs {
                    if let Some((_, to)) = rename.iter().find(|(from, _)| from == input) {
                        *input = to.clone();
                    }
                }
                kept.push(spec);
                params.extend(model.layer_param_sets(i).cloned());
            }
        }
    }

    let meta = ModelMeta {
        folded: true,
        ..model.meta().clone()
    };
    ModelGraph::new(meta, kept, params)
}
