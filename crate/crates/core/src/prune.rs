//! Structured channel pruning: per-layer sensitivity sweeps, FLOP-targeted
//! greedy allocation and channel removal with consistent rewiring.
//!
//! Ratios are handled in integer tenths (`steps`), so a step of 5 means a
//! ratio of 0.5.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{global_iou, ClassMap};
use crate::model::{account_layers, LayerKind, LayerSpec, ModelGraph, ParamKind, ParameterSet, INPUT_ID};
use crate::tensor::Tensor;

pub const MAX_STEPS: u8 = 9;

/// Slack above the target that a greedy step may overshoot by.
pub const ALLOCATION_TOLERANCE: f64 = 0.02;

/// Output channels removed from a layer with `cout` channels at `steps`
/// tenths: `ceil(steps·cout/10)`, always leaving at least one channel.
pub fn removal_count(cout: usize, steps: u8) -> usize {
    if steps == 0 || cout == 0 {
        return 0;
    }
    (steps as usize * cout).div_ceil(10).min(cout - 1)
}

/// Layers whose output channels can be pruned: convolutions and transposed
/// convolutions with at least two output channels.
pub fn prunable_layers(model: &ModelGraph) -> Vec<String> {
    model
        .layers()
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv { filters, .. } | LayerKind::ConvTranspose { filters, .. } if filters >= 2))
        .map(|l| l.id.clone())
        .collect()
}

/// Per-layer ratio steps; layers not listed stay unpruned.
pub type Ratios = Vec<(String, u8)>;

fn steps_map(model: &ModelGraph, ratios: &[(String, u8)]) -> Result<HashMap<usize, u8>> {
    let mut out = HashMap::new();
    for (id, steps) in ratios {
        let idx = model
            .layer_index(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer `{id}`")))?;
        if !matches!(model.layers()[idx].kind, LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. }) {
            return Err(Error::InvalidArgument(format!("layer `{id}` is not prunable")));
        }
        if *steps > MAX_STEPS {
            return Err(Error::InvalidArgument(format!("ratio {}/10 for `{id}` exceeds 0.9", steps)));
        }
        if out.insert(idx, *steps).is_some() {
            return Err(Error::InvalidArgument(format!("layer `{id}` listed twice")));
        }
    }
    Ok(out)
}

fn with_filters(kind: LayerKind, n: usize) -> LayerKind {
    match kind {
        LayerKind::Conv {
            kernel,
            stride,
            padding,
            ..
        } => LayerKind::Conv {
            filters: n,
            kernel,
            stride,
            padding,
        },
        LayerKind::ConvTranspose { kernel, stride, .. } => LayerKind::ConvTranspose {
            filters: n,
            kernel,
            stride,
        },
        other => other,
    }
}

/// Layer specs after pruning, without touching weights.
pub fn pruned_specs(model: &ModelGraph, ratios: &[(String, u8)]) -> Result<Vec<LayerSpec>> {
    let steps = steps_map(model, ratios)?;
    Ok(model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| match (steps.get(&i), l.kind.out_channels()) {
            (Some(&s), Some(c)) => LayerSpec {
                kind: with_filters(l.kind, c - removal_count(c, s)),
                ..l.clone()
            },
            _ => l.clone(),
        })
        .collect())
}

pub fn flops_after(model: &ModelGraph, ratios: &[(String, u8)]) -> Result<u64> {
    Ok(account_layers(&pruned_specs(model, ratios)?, model.input_shape())?.flops)
}

/// Output channels to keep, ascending. Channels are removed in order of
/// increasing L2 norm of their kernel slice; equal norms remove the higher
/// index first.
fn kept_channels(kernel: &ParameterSet, steps: u8) -> Vec<usize> {
    let cout = *kernel.shape.last().expect("rank-4 kernel");
    let mut norms = vec![0.0f64; cout];
    for (j, &v) in kernel.values.iter().enumerate() {
        norms[j % cout] += v as f64 * v as f64;
    }
    let mut order: Vec<usize> = (0..cout).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(b.cmp(&a)));
    let drop = removal_count(cout, steps);
    let mut kept: Vec<usize> = order[drop..].to_vec();
    kept.sort_unstable();
    kept
}

fn select_kernel(set: &ParameterSet, ins: &[usize], outs: &[usize]) -> ParameterSet {
    let [kh, kw, cin, cout] = [set.shape[0], set.shape[1], set.shape[2], set.shape[3]];
    let mut values = Vec::with_capacity(kh * kw * ins.len() * outs.len());
    for k in 0..kh * kw {
        for &ci in ins {
            let row = &set.values[(k * cin + ci) * cout..][..cout];
            values.extend(outs.iter().map(|&co| row[co]));
        }
    }
    ParameterSet::new(&set.layer, set.kind, vec![kh, kw, ins.len(), outs.len()], values)
}

fn select_vec(set: &ParameterSet, keep: &[usize]) -> ParameterSet {
    ParameterSet::new(
        &set.layer,
        set.kind,
        vec![keep.len()],
        keep.iter().map(|&c| set.values[c]).collect(),
    )
}

/// Removes output channels per `ratios` and rewires batch norms, pools,
/// activations, skip concatenations and consumer convolutions.
pub fn prune_channels(model: &ModelGraph, ratios: &[(String, u8)]) -> Result<ModelGraph> {
    let steps = steps_map(model, ratios)?;
    let layers = model.layers();
    let all = |n: usize| (0..n).collect::<Vec<usize>>();
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    let mut new_layers = Vec::with_capacity(layers.len());
    let mut params = Vec::with_capacity(model.params().len());
    let input_kept = all(model.input_shape()[2]);

    for (i, layer) in layers.iter().enumerate() {
        let src = |k: usize| -> Result<&Vec<usize>> {
            if layer.inputs[k] == INPUT_ID {
                return Ok(&input_kept);
            }
            let j = model
                .layer_index(&layer.inputs[k])
                .ok_or_else(|| Error::Build(format!("layer `{}` lost input `{}`", layer.id, layer.inputs[k])))?;
            Ok(&kept[j])
        };
        let sets: Vec<&ParameterSet> = model.layer_param_sets(i).collect();
        let out: Vec<usize> = match layer.kind {
            LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } | LayerKind::OutputConv { .. } => {
                let (kernel, bias) = (sets[0], sets[1]);
                let outs = match steps.get(&i) {
                    Some(&s) => kept_channels(kernel, s),
                    None => all(*kernel.shape.last().unwrap()),
                };
                let ins = src(0)?;
                params.push(select_kernel(kernel, ins, &outs));
                params.push(select_vec(bias, &outs));
                outs
            }
            LayerKind::BatchNorm { .. } => {
                let keep = src(0)?.clone();
                params.extend(sets.iter().map(|s| select_vec(s, &keep)));
                keep
            }
            LayerKind::Activation { .. } | LayerKind::MaxPool => src(0)?.clone(),
            LayerKind::Concat => {
                let a_orig = match model.layer_index(&layer.inputs[0]) {
                    Some(j) => model.layer_shapes()[j][2],
                    None => model.input_shape()[2],
                };
                let mut keep = src(0)?.clone();
                keep.extend(src(1)?.iter().map(|&c| a_orig + c));
                keep
            }
        };
        let kind = match layer.kind {
            LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } => with_filters(layer.kind, out.len()),
            k => k,
        };
        new_layers.push(LayerSpec {
            kind,
            ..layer.clone()
        });
        kept.push(out);
    }
    for (p, orig) in params.iter().zip(model.params()) {
        if p.id != orig.id {
            return Err(Error::Build(format!("rewiring reordered set `{}`", orig.id)));
        }
    }
    debug_assert!(params.iter().all(|p| p.kind != ParamKind::ConvKernel || p.shape.len() == 4));
    ModelGraph::new(model.meta().clone(), new_layers, params)
}

/// What pruning sensitivity is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Predictions of the unpruned model.
    #[default]
    Golden,
    /// Ground-truth labels.
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub layer: String,
    pub steps: u8,
    /// GIoU percentage after pruning only this layer.
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub reference: Reference,
    pub baseline: f64,
    pub rows: Vec<SensitivityRow>,
    /// Layers left out because they have fewer than two output channels.
    pub skipped: Vec<String>,
}

impl SensitivityTable {
    /// Metric for `layer` at `steps`; step 0 is the baseline.
    pub fn metric(&self, layer: &str, steps: u8) -> Option<f64> {
        if steps == 0 {
            return Some(self.baseline);
        }
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.steps == steps)
            .map(|r| r.metric)
    }

    pub fn layers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.layer.as_str()) {
                out.push(&r.layer);
            }
        }
        out
    }
}

fn predict(model: &ModelGraph, images: &[Tensor]) -> Result<Vec<ClassMap>> {
    images.iter().map(|x| model.forward(x).map(|(_, m)| m)).collect()
}

/// Prunes each layer alone at every step in `steps` and scores GIoU against
/// the reference maps.
pub fn sensitivity_sweep(
    model: &ModelGraph,
    images: &[Tensor],
    labels: Option<&[ClassMap]>,
    steps: &[u8],
) -> Result<SensitivityTable> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    let golden;
    let (reference, refs) = match labels {
        Some(l) => (Reference::Labels, l),
        None => {
            golden = predict(model, images)?;
            (Reference::Golden, golden.as_slice())
        }
    };
    let baseline = global_iou(&predict(model, images)?, refs)?;
    let mut skipped = Vec::new();
    let mut jobs = Vec::new();
    for l in model.layers() {
        match l.kind {
            LayerKind::Conv { filters, .. } | LayerKind::ConvTranspose { filters, .. } => {
                if filters < 2 {
                    log::info!("sensitivity: skipping `{}` with {filters} output channel(s)", l.id);
                    skipped.push(l.id.clone());
                    continue;
                }
                for &s in steps.iter().filter(|&&s| s > 0) {
                    jobs.push((l.id.clone(), s));
                }
            }
            _ => {}
        }
    }
    let rows = jobs
        .par_iter()
        .map(|(layer, s)| {
            let pruned = prune_channels(model, &[(layer.clone(), *s)])?;
            Ok(SensitivityRow {
                layer: layer.clone(),
                steps: *s,
                metric: global_iou(&predict(&pruned, images)?, refs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityTable {
        reference,
        baseline,
        rows,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneAllocation {
    pub ratios: Ratios,
    pub target: f64,
    pub base_flops: u64,
    pub pruned_flops: u64,
    /// Achieved fraction of FLOPs removed.
    pub reduction: f64,
}

/// Greedy FLOP-targeted allocation: repeatedly raises to its next swept step
/// the ratio of the layer with the smallest metric loss per FLOP removed
/// until the reduction reaches `target`. Steps overshooting `target + 0.02` are only
/// taken when nothing else can make progress.
pub fn allocate_ratios(table: &SensitivityTable, target: f64, model: &ModelGraph) -> Result<PruneAllocation> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("FLOP target must lie in [0, 1), got {target}")));
    }
    let base_flops = account_layers(model.layers(), model.input_shape())?.flops;
    let layers: Vec<String> = table.layers().into_iter().map(String::from).collect();
    let swept: Vec<Vec<u8>> = layers
        .iter()
        .map(|l| {
            let mut s: Vec<u8> = table.rows.iter().filter(|r| &r.layer == l).map(|r| r.steps).collect();
            s.sort_unstable();
            s.dedup();
            s
        })
        .collect();
    let mut current: Vec<u8> = vec![0; layers.len()];
    let ratios_of = |cur: &[u8]| -> Ratios {
        layers
            .iter()
            .zip(cur)
            .filter(|(_, &s)| s > 0)
            .map(|(l, &s)| (l.clone(), s))
            .collect()
    };
    let reduction_of = |flops: u64| 1.0 - flops as f64 / base_flops as f64;
    let mut flops = base_flops;

    while reduction_of(flops) < target {
        // (score, resulting reduction, layer position, new step, new flops)
        let mut best: Option<(f64, f64, usize, u8, u64)> = None;
        let mut best_over: Option<(f64, f64, usize, u8, u64)> = None;
        for (k, layer) in layers.iter().enumerate() {
            let Some(m0) = table.metric(layer, current[k]) else {
                continue;
            };
            // Next swept step of this layer that actually removes FLOPs.
            let mut found = None;
            for &s in swept[k].iter().filter(|&&s| s > current[k]) {
                let mut trial = current.clone();
                trial[k] = s;
                let f = flops_after(model, &ratios_of(&trial))?;
                if f < flops {
                    found = Some((s, f));
                    break;
                }
            }
            let Some((next, f)) = found else {
                continue;
            };
            let m1 = table.metric(layer, next).expect("swept step");
            let score = (m0 - m1) / (flops - f) as f64;
            let red = reduction_of(f);
            let slot = if red > target + ALLOCATION_TOLERANCE {
                &mut best_over
            } else {
                &mut best
            };
            let better = match slot {
                None => true,
                Some((s, r, ..)) => {
                    if red > target + ALLOCATION_TOLERANCE {
                        red < *r
                    } else {
                        score < *s
                    }
                }
            };
            if better {
                *slot = Some((score, red, k, next, f));
            }
        }
        match best.or(best_over) {
            Some((_, _, k, next, f)) => {
                current[k] = next;
                flops = f;
            }
            None => {
                let max: Ratios = layers
                    .iter()
                    .zip(&swept)
                    .filter_map(|(l, s)| s.last().map(|&m| (l.clone(), m)))
                    .collect();
                let max_achievable = reduction_of(flops_after(model, &max)?);
                return Err(Error::UnreachableTarget {
                    target,
                    max_achievable,
                });
            }
        }
    }
    Ok(PruneAllocation {
        ratios: ratios_of(&current),
        target,
        base_flops,
        pruned_flops: flops,
        reduction: reduction_of(flops),
    })
}

/// One round of sweep, allocation and pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneIteration {
    pub table: SensitivityTable,
    pub allocation: PruneAllocation,
    /// GIoU of the pruned model against the iteration's reference.
    pub metric_after: f64,
}

/// Applies the per-iteration FLOP targets in sequence, each relative to the
/// model produced by the previous iteration.
pub fn iterative_prune(
    model: &ModelGraph,
    images: &[Tensor],
    labels: Option<&[ClassMap]>,
    targets: &[f64],
    steps: &[u8],
) -> Result<(ModelGraph, Vec<PruneIteration>)> {
    let mut current = model.clone();
    let mut log = Vec::with_capacity(targets.len());
    for &t in targets {
        let table = sensitivity_sweep(&current, images, labels, steps)?;
        let allocation = allocate_ratios(&table, t, &current)?;
        let pruned = prune_channels(&current, &allocation.ratios)?;
        let refs = match labels {
            Some(l) => l.to_vec(),
            None => predict(&current, images)?,
        };
        let metric_after = global_iou(&predict(&pruned, images)?, &refs)?;
        log.push(PruneIteration {
            table,
            allocation,
            metric_after,
        });
        current = pruned;
    }
    Ok((current, log))
}

/// `layer,ratio,metric` rows, baseline first per layer.
pub fn write_sensitivity_csv(path: &Path, table: &SensitivityTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "ratio", "metric"])?;
    for layer in table.layers() {
        w.write_record([layer.to_string(), "0".into(), table.baseline.to_string()])?;
        for r in table.rows.iter().filter(|r| r.layer == layer) {
            w.write_record([r.layer.clone(), ratio_text(r.steps), r.metric.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_allocation_csv(path: &Path, model: &ModelGraph, allocation: &PruneAllocation) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "ratio", "channels_before", "channels_after"])?;
    for l in model.layers() {
        if let LayerKind::Conv { filters, .. } | LayerKind::ConvTranspose { filters, .. } = l.kind {
            let s = allocation
                .ratios
                .iter()
                .find(|(id, _)| id == &l.id)
                .map_or(0, |(_, s)| *s);
            w.write_record([
                l.id.clone(),
                ratio_text(s),
                filters.to_string(),
                (filters - removal_count(filters, s)).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ratio_text(steps: u8) -> String {
    if steps == 0 {
        "0".into()
    } else {
        format!("0.{steps}")
    }
}
