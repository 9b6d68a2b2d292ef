//! fp32 graph execution, including incremental re-execution of a faulted
//! model from a cached golden trace.

use std::borrow::Cow;

use super::{InputRef, LayerKind, ModelGraph};
use crate::error::{Error, Result};
use crate::metrics::ClassMap;
use crate::tensor::{self, Tensor};

/// Supplies parameter values by set index.
pub trait ParamSource {
    fn set_values(&self, set_idx: usize) -> &[f32];
}

impl ParamSource for ModelGraph {
    fn set_values(&self, set_idx: usize) -> &[f32] {
        &self.params[set_idx].values
    }
}

/// A private copy of one parameter set layered over a shared model.
#[derive(Debug, Clone)]
pub struct PatchedSet<'a> {
    pub(crate) base: &'a ModelGraph,
    pub(crate) set_idx: usize,
    pub(crate) values: Vec<f32>,
}

impl<'a> PatchedSet<'a> {
    pub fn new(base: &'a ModelGraph, set_id: &str) -> Result<Self> {
        let set_idx = base
            .param_index(set_id)
            .ok_or_else(|| Error::UnknownParamSet(set_id.to_string()))?;
        Ok(Self {
            base,
            set_idx,
            values: base.params[set_idx].values.clone(),
        })
    }

    pub fn set_idx(&self) -> usize {
        self.set_idx
    }

    pub fn set_id(&self) -> &str {
        &self.base.params[self.set_idx].id
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

impl ParamSource for PatchedSet<'_> {
    fn set_values(&self, set_idx: usize) -> &[f32] {
        if set_idx == self.set_idx {
            &self.values
        } else {
            &self.base.params[set_idx].values
        }
    }
}

/// Outputs of every layer for one image, in layer order.
#[derive(Debug, Clone)]
pub struct Trace {
    pub outputs: Vec<Tensor>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("model has at least one layer")
    }
}

impl ModelGraph {
    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.meta.input_shape {
            return Err(Error::shape("forward", image.shape(), &self.meta.input_shape));
        }
        Ok(())
    }

    fn eval_layer(&self, idx: usize, inputs: &[&Tensor], src: &impl ParamSource) -> Tensor {
        let layer = &self.layers[idx];
        let p = &self.layer_params[idx];
        let x = inputs[0];
        let cin = x.shape()[2];
        match layer.kind {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding,
            } => tensor::conv2d_raw(
                x,
                src.set_values(p[0]),
                [kernel, kernel, cin, filters],
                src.set_values(p[1]),
                stride,
                padding,
            ),
            LayerKind::OutputConv { classes } => tensor::conv2d_raw(
                x,
                src.set_values(p[0]),
                [1, 1, cin, classes],
                src.set_values(p[1]),
                1,
                tensor::Padding::Valid,
            ),
            LayerKind::ConvTranspose {
                filters,
                kernel,
                stride,
            } => tensor::conv2d_transpose_raw(
                x,
                src.set_values(p[0]),
                [kernel, kernel, cin, filters],
                src.set_values(p[1]),
                stride,
            ),
            LayerKind::BatchNorm { eps } => tensor::batchnorm_raw(
                x,
                src.set_values(p[0]),
                src.set_values(p[1]),
                src.set_values(p[2]),
                src.set_values(p[3]),
                eps,
            ),
            LayerKind::Activation { activation } => tensor::apply_activation(x, activation),
            LayerKind::MaxPool => tensor::maxpool2d_raw(x),
            LayerKind::Concat => {
                tensor::concat_channels(x, inputs[1]).expect("concat extents validated at build")
            }
        }
    }

    fn run(&self, image: &Tensor, src: &impl ParamSource) -> Vec<Tensor> {
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let y = {
                let ins: Vec<&Tensor> = self.resolved[i]
                    .iter()
                    .map(|r| match *r {
                        InputRef::Image => image,
                        InputRef::Layer(j) => &outputs[j],
                    })
                    .collect();
                self.eval_layer(i, &ins, src)
            };
            outputs.push(y);
        }
        outputs
    }

    /// Runs the whole graph and returns `(logits, argmax classes)`.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, ClassMap)> {
        let trace = self.trace(image)?;
        let logits = trace.outputs.into_iter().last().expect("non-empty model");
        let classes = tensor::argmax_channels(&logits)?;
        Ok((logits, classes))
    }

    pub fn trace(&self, image: &Tensor) -> Result<Trace> {
        self.check_image(image)?;
        Ok(Trace {
            outputs: self.run(image, self),
        })
    }

    /// Full re-execution against an arbitrary parameter source.
    pub fn trace_with(&self, image: &Tensor, src: &impl ParamSource) -> Result<Trace> {
        self.check_image(image)?;
        Ok(Trace {
            outputs: self.run(image, src),
        })
    }

    /// Re-executes only the layers downstream of the patched set, reusing the
    /// golden trace for everything else. Returned outputs borrow from `golden`
    /// where unchanged.
    pub fn patched_outputs<'t>(
        &self,
        image: &Tensor,
        golden: &'t Trace,
        patch: &PatchedSet<'_>,
    ) -> Result<Vec<Cow<'t, Tensor>>> {
        self.check_image(image)?;
        let first = self.owner_of(patch.set_idx);
        let mut dirty = vec![false; self.layers.len()];
        dirty[first] = true;
        let mut outputs: Vec<Cow<'t, Tensor>> = golden.outputs[..first]
            .iter()
            .map(Cow::Borrowed)
            .collect();
        for i in first..self.layers.len() {
            if i != first {
                dirty[i] = self.resolved[i]
                    .iter()
                    .any(|r| matches!(*r, InputRef::Layer(j) if dirty[j]));
            }
            if !dirty[i] {
                outputs.push(Cow::Borrowed(&golden.outputs[i]));
                continue;
            }
            let y = {
                let ins: Vec<&Tensor> = self.resolved[i]
                    .iter()
                    .map(|r| match *r {
                        InputRef::Image => image,
                        InputRef::Layer(j) => outputs[j].as_ref(),
                    })
                    .collect();
                self.eval_layer(i, &ins, patch)
            };
            outputs.push(Cow::Owned(y));
        }
        Ok(outputs)
    }

    pub fn forward_patched(
        &self,
        image: &Tensor,
        golden: &Trace,
        patch: &PatchedSet<'_>,
    ) -> Result<ClassMap> {
        let outputs = self.patched_outputs(image, golden, patch)?;
        tensor::argmax_channels(outputs.last().expect("non-empty model"))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_unet, init_weights, InitScheme, LayerKind};
    use super::*;
    use crate::tensor::{
        apply_activation, batchnorm_infer, concat_channels, conv2d, conv2d_transpose, maxpool2d,
        ActivationKind, Padding,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn image(shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    // Straight-line interpreter over the public kernel API, keyed by layer id.
    fn interpret(model: &ModelGraph, x: &Tensor) -> Tensor {
        let mut env: HashMap<String, Tensor> = HashMap::new();
        env.insert("input".into(), x.clone());
        let mut last = None;
        for layer in model.layers() {
            let get = |k: usize| env[&layer.inputs[k]].clone();
            let p = |tag: &str| model.param(&format!("{}/{tag}", layer.id)).unwrap();
            let kt = |tag: &str| {
                let s = p(tag);
                Tensor::new(s.shape.clone(), s.values.clone()).unwrap()
            };
            let y = match layer.kind {
                LayerKind::Conv { stride, padding, .. } => {
                    conv2d(&get(0), &kt("kernel"), &p("bias").values, stride, padding).unwrap()
                }
                LayerKind::OutputConv { .. } => {
                    conv2d(&get(0), &kt("kernel"), &p("bias").values, 1, Padding::Valid).unwrap()
                }
                LayerKind::ConvTranspose { stride, .. } => {
                    conv2d_transpose(&get(0), &kt("kernel"), &p("bias").values, stride).unwrap()
                }
                LayerKind::BatchNorm { eps } => batchnorm_infer(
                    &get(0),
                    &p("gamma").values,
                    &p("beta").values,
                    &p("mean").values,
                    &p("var").values,
                    eps,
                )
                .unwrap(),
                LayerKind::Activation { activation } => apply_activation(&get(0), activation),
                LayerKind::MaxPool => maxpool2d(&get(0)).unwrap(),
                LayerKind::Concat => concat_channels(&get(0), &get(1)).unwrap(),
            };
            env.insert(layer.id.clone(), y.clone());
            last = Some(y);
        }
        last.unwrap()
    }

    #[test]
    fn forward_matches_interpreter() {
        for af in [ActivationKind::Relu, ActivationKind::Sigmoid, ActivationKind::HardSigmoid] {
            let m = build_unet(2, 2, [8, 8, 3], 3, af).unwrap();
            let m = init_weights(&m, 17, InitScheme::He);
            let x = image([8, 8, 3], 4);
            let (logits, classes) = m.forward(&x).unwrap();
            assert_eq!(logits.bits(), interpret(&m, &x).bits());
            assert_eq!(classes, tensor::argmax_channels(&logits).unwrap());
        }
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let m = build_unet(1, 2, [4, 4, 2], 3, ActivationKind::Relu).unwrap();
        let (logits, classes) = m.forward(&image([4, 4, 2], 1)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(classes.labels().iter().all(|&c| c == 0));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = init_weights(&build_unet(2, 2, [8, 8, 1], 2, ActivationKind::Relu).unwrap(), 3, InitScheme::Glorot);
        let x = image([8, 8, 1], 9);
        assert_eq!(m.forward(&x).unwrap().0.bits(), m.forward(&x).unwrap().0.bits());
        assert!(m.forward(&image([8, 4, 1], 9)).is_err());
    }

    #[test]
    fn patched_run_equals_full_rerun() {
        let m = init_weights(&build_unet(2, 2, [8, 8, 2], 3, ActivationKind::Relu).unwrap(), 5, InitScheme::He);
        let x = image([8, 8, 2], 2);
        let golden = m.trace(&x).unwrap();
        for set in ["enc0_conv1/kernel", "base_bn2/gamma", "dec1_up/bias", "logits/kernel"] {
            let mut patch = PatchedSet::new(&m, set).unwrap();
            patch.values_mut()[0] = 37.5;
            let fast = m.patched_outputs(&x, &golden, &patch).unwrap();
            let full = m.trace_with(&x, &patch).unwrap();
            for (a, b) in fast.iter().zip(&full.outputs) {
                assert_eq!(a.bits(), b.bits(), "{set}");
            }
        }
    }
}
