use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{ModelGraph, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normal with std `sqrt(2 / fan_in)`.
    #[default]
    He,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
}

/// Returns a copy with freshly drawn kernels. Biases and batch-norm beta/mean
/// are zeroed, gamma and var set to one. Each set draws from its own ChaCha8
/// stream so the result does not depend on evaluation order.
pub fn init_weights(model: &ModelGraph, seed: u64, scheme: InitScheme) -> ModelGraph {
    let mut out = model.clone();
    for (i, set) in out.params_mut().iter_mut().enumerate() {
        match set.kind {
            ParamKind::ConvKernel => {
                let [kh, kw, cin, cout] = [set.shape[0], set.shape[1], set.shape[2], set.shape[3]];
                let fan_in = (kh * kw * cin) as f64;
                let fan_out = (kh * kw * cout) as f64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                fill(&mut set.values, scheme, fan_in, fan_out, &mut rng);
            }
            ParamKind::ConvBias | ParamKind::BnBeta | ParamKind::BnMean => set.values.fill(0.0),
            ParamKind::BnGamma | ParamKind::BnVar => set.values.fill(1.0),
        }
    }
    out
}

fn fill(values: &mut [f32], scheme: InitScheme, fan_in: f64, fan_out: f64, rng: &mut impl Rng) {
    match scheme {
        InitScheme::He => {
            let d = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            values.iter_mut().for_each(|v| *v = d.sample(rng) as f32);
        }
        InitScheme::Glorot => {
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let d = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            values.iter_mut().for_each(|v| *v = d.sample(rng) as f32);
        }
    }
}
