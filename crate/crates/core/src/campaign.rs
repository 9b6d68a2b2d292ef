//! Campaign sizing, golden baselines, parallel injection runs and
//! aggregation into vulnerability reports.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fault::{f32_target_sets, Domain, FaultPlan, FaultSpec, FaultTarget, TargetSet};
use crate::metrics::ClassMap;
use crate::model::{ModelGraph, ParamKind, PatchedSet, Trace};
use crate::quant::{QPatchedSet, QTrace, QuantModel};
use crate::tensor::Tensor;

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

/// Two-sided normal quantile for `confidence`.
pub fn normal_quantile(confidence: f64) -> Result<f64> {
    check_fraction("confidence", confidence)?;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - (1.0 - confidence) / 2.0))
}

/// Sample size for estimating a proportion with margin `e` at `confidence`,
/// with the finite-population correction when `population` is given.
pub fn required_sample_size(
    population: Option<u64>,
    e: f64,
    confidence: f64,
    p: f64,
) -> Result<u64> {
    check_fraction("error margin", e)?;
    check_fraction("failure probability", p)?;
    let t = normal_quantile(confidence)?;
    let base = t * t * p * (1.0 - p);
    let n = match population {
        None => base / (e * e),
        Some(0) => 0.0,
        Some(n) => {
            let n = n as f64;
            n / (1.0 + e * e * (n - 1.0) / base)
        }
    };
    // Guards against values like 1537.0000000001 from the quantile.
    Ok((n - 1e-9).ceil().max(0.0) as u64)
}

/// A model the campaign engine can inject faults into.
pub trait FaultableModel: Sync {
    /// Cached per-image state reused by every injection.
    type Golden: Send + Sync;

    fn fingerprint(&self) -> String;
    fn target_sets(&self) -> Vec<TargetSet>;
    fn golden(&self, image: &Tensor) -> Result<(Self::Golden, ClassMap)>;
    /// Runs every image with `spec` applied to a private copy of its set.
    fn inject(&self, spec: &FaultSpec, images: &[Tensor], golden: &[Self::Golden]) -> Result<Injected>;
}

/// Raw outcome of one injection before comparison with the golden maps.
#[derive(Debug, Clone)]
pub struct Injected {
    pub original_bits: u32,
    pub new_bits: u32,
    pub nonfinite: bool,
    pub saturated: bool,
    pub maps: Vec<ClassMap>,
}

impl FaultableModel for ModelGraph {
    type Golden = Trace;

    fn fingerprint(&self) -> String {
        ModelGraph::fingerprint(self)
    }

    fn target_sets(&self) -> Vec<TargetSet> {
        f32_target_sets(self)
    }

    fn golden(&self, image: &Tensor) -> Result<(Trace, ClassMap)> {
        let trace = self.trace(image)?;
        let map = crate::tensor::argmax_channels(trace.logits())?;
        Ok((trace, map))
    }

    fn inject(&self, spec: &FaultSpec, images: &[Tensor], golden: &[Trace]) -> Result<Injected> {
        let mut patch = PatchedSet::new(self, &spec.param_set)?;
        let token = patch.apply_fault(spec)?;
        let maps = images
            .iter()
            .zip(golden)
            .map(|(x, g)| self.forward_patched(x, g, &patch))
            .collect::<Result<Vec<_>>>()?;
        Ok(Injected {
            original_bits: token.original_bits,
            new_bits: token.new_bits,
            nonfinite: !f32::from_bits(token.new_bits).is_finite(),
            saturated: false,
            maps,
        })
    }
}

impl FaultableModel for QuantModel {
    type Golden = QTrace;

    fn fingerprint(&self) -> String {
        QuantModel::fingerprint(self)
    }

    fn target_sets(&self) -> Vec<TargetSet> {
        self.sets()
            .iter()
            .map(|s| TargetSet {
                id: s.id.clone(),
                layer: s.layer.clone(),
                kind: s.kind,
                len: s.tensor.len(),
                domain: if s.tensor.width == 8 { Domain::I8 } else { Domain::I32 },
            })
            .collect()
    }

    fn golden(&self, image: &Tensor) -> Result<(QTrace, ClassMap)> {
        let out = crate::quant::quant_forward(self, image)?;
        Ok((out.trace, out.classes))
    }

    fn inject(&self, spec: &FaultSpec, _images: &[Tensor], golden: &[QTrace]) -> Result<Injected> {
        let mut patch = QPatchedSet::new(self, &spec.param_set)?;
        let token = patch.apply_fault(spec)?;
        let mut saturated = false;
        let maps = golden
            .iter()
            .map(|g| {
                let (map, sat) = self.forward_patched(g, &patch);
                saturated |= sat;
                map
            })
            .collect();
        Ok(Injected {
            original_bits: token.original_bits,
            new_bits: token.new_bits,
            nonfinite: false,
            saturated,
            maps,
        })
    }
}

/// Fault-free predictions over the test images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenResult {
    pub maps: Vec<ClassMap>,
    pub class_counts: Vec<u64>,
    pub total_pixels: u64,
}

pub fn run_golden<M: FaultableModel>(model: &M, images: &[Tensor]) -> Result<GoldenResult> {
    let maps = images
        .iter()
        .map(|x| model.golden(x).map(|(_, m)| m))
        .collect::<Result<Vec<_>>>()?;
    Ok(golden_from_maps(maps))
}

fn golden_from_maps(maps: Vec<ClassMap>) -> GoldenResult {
    let classes = maps.iter().map(ClassMap::classes).max().unwrap_or(0);
    let mut class_counts = vec![0u64; classes];
    for m in &maps {
        for (acc, c) in class_counts.iter_mut().zip(m.class_counts()) {
            *acc += c;
        }
    }
    let total_pixels = maps.iter().map(|m| m.len() as u64).sum();
    GoldenResult {
        maps,
        class_counts,
        total_pixels,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub spec: FaultSpec,
    pub layer: String,
    pub kind: ParamKind,
    pub original_bits: u32,
    pub new_bits: u32,
    /// Percentage of test pixels whose predicted class changed.
    pub pixel_change_rate: f64,
    pub critical: bool,
    pub nonfinite: bool,
    pub saturated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image_rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunOptions {
    pub per_image_rates: bool,
}

/// Executes every spec of `plan` against private copies of the targeted
/// sets. Specs run in parallel on the current rayon pool; records come back
/// in plan order.
pub fn run_campaign<M: FaultableModel>(
    model: &M,
    plan: &FaultPlan,
    images: &[Tensor],
    golden: &GoldenResult,
    options: RunOptions,
) -> Result<Vec<InjectionRecord>> {
    let hash = model.fingerprint();
    if plan.model_hash != hash {
        return Err(Error::PlanMismatch {
            expected: format!("model {}", plan.model_hash),
            actual: format!("model {hash}"),
        });
    }
    if images.len() != golden.maps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} golden maps",
            images.len(),
            golden.maps.len()
        )));
    }
    let sets = model.target_sets();
    for g in &plan.groups {
        let set = sets
            .iter()
            .find(|s| s.id == g.set_id)
            .ok_or_else(|| Error::UnknownParamSet(g.set_id.clone()))?;
        if set.domain != g.domain || g.bit >= set.domain.width() {
            return Err(Error::BitOutOfRange {
                bit: g.bit,
                width: set.domain.width(),
            });
        }
        if let Some(&e) = g.elements.iter().find(|&&e| e >= set.len) {
            return Err(Error::IndexOutOfBounds {
                set: g.set_id.clone(),
                index: e,
                len: set.len,
            });
        }
    }
    let cache = images
        .iter()
        .zip(&golden.maps)
        .map(|(x, want)| {
            let (g, map) = model.golden(x)?;
            if &map != want {
                return Err(Error::InvalidArgument("golden maps do not match this model".into()));
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let specs: Vec<(FaultSpec, usize)> = plan.specs().zip(plan.group_of_spec()).collect();
    let total = golden.total_pixels.max(1) as f64;
    specs
        .par_iter()
        .map(|(spec, g)| {
            let group = &plan.groups[*g];
            let out = model.inject(spec, images, &cache)?;
            let per_image: Vec<usize> = out
                .maps
                .iter()
                .zip(&golden.maps)
                .map(|(a, b)| a.count_changed(b))
                .collect();
            let changed: usize = per_image.iter().sum();
            Ok(InjectionRecord {
                spec: spec.clone(),
                layer: group.layer.clone(),
                kind: group.kind,
                original_bits: out.original_bits,
                new_bits: out.new_bits,
                pixel_change_rate: 100.0 * changed as f64 / total,
                critical: changed > 0,
                nonfinite: out.nonfinite,
                saturated: out.saturated,
                per_image_rates: options.per_image_rates.then(|| {
                    per_image
                        .iter()
                        .zip(&golden.maps)
                        .map(|(&c, m)| 100.0 * c as f64 / m.len().max(1) as f64)
                        .collect()
                }),
            })
        })
        .collect()
}

/// Sum of values in ascending order, so the result does not depend on the
/// order records arrive in.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = ordered_sum(&mut values.to_vec()) / n;
    let mut dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, (ordered_sum(&mut dev) / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub set_id: String,
    pub layer: String,
    pub kind: ParamKind,
    pub domain: Domain,
    pub bit: u32,
    pub n: usize,
    pub mean_rate: f64,
    pub std_rate: f64,
    /// Fraction (0 to 1) of injections that changed at least one pixel.
    pub critical_fraction: f64,
    pub nonfinite_fraction: f64,
    pub saturated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub set_id: String,
    pub layer: String,
    pub kind: ParamKind,
    pub n: usize,
    pub mean_rate: f64,
    pub std_rate: f64,
    pub critical_fraction: f64,
}

/// Aggregated error rates. Standard deviations are population deviations;
/// the model-level deviation is taken across group means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityReport {
    pub groups: Vec<GroupStats>,
    pub sets: Vec<SetStats>,
    pub injections: usize,
    pub model_mean_rate: f64,
    pub model_std_rate: f64,
    pub model_critical_fraction: f64,
}

impl VulnerabilityReport {
    pub fn group(&self, set_id: &str, bit: u32) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.set_id == set_id && g.bit == bit)
    }

    pub fn set(&self, set_id: &str) -> Option<&SetStats> {
        self.sets.iter().find(|s| s.set_id == set_id)
    }
}

fn fraction(flags: impl Iterator<Item = bool>, n: usize) -> f64 {
    flags.filter(|&f| f).count() as f64 / n as f64
}

/// Groups records by `(set, bit)` and by set, keeping the first-seen order of
/// sets and ascending bits within a set.
pub fn summarize(records: &[InjectionRecord]) -> Result<VulnerabilityReport> {
    if records.is_empty() {
        return Err(Error::Empty("injection records"));
    }
    let mut set_order: Vec<&str> = Vec::new();
    let mut by_group: BTreeMap<(usize, u32), Vec<&InjectionRecord>> = BTreeMap::new();
    for r in records {
        let s = match set_order.iter().position(|&s| s == r.spec.param_set) {
            Some(s) => s,
            None => {
                set_order.push(&r.spec.param_set);
                set_order.len() - 1
            }
        };
        by_group.entry((s, r.spec.bit)).or_default().push(r);
    }
    let groups: Vec<GroupStats> = by_group
        .values()
        .map(|rs| {
            let rates: Vec<f64> = rs.iter().map(|r| r.pixel_change_rate).collect();
            let (mean_rate, std_rate) = mean_std(&rates);
            let n = rs.len();
            GroupStats {
                set_id: rs[0].spec.param_set.clone(),
                layer: rs[0].layer.clone(),
                kind: rs[0].kind,
                domain: rs[0].spec.domain,
                bit: rs[0].spec.bit,
                n,
                mean_rate,
                std_rate,
                critical_fraction: fraction(rs.iter().map(|r| r.critical), n),
                nonfinite_fraction: fraction(rs.iter().map(|r| r.nonfinite), n),
                saturated_fraction: fraction(rs.iter().map(|r| r.saturated), n),
            }
        })
        .collect();
    let sets = set_order
        .iter()
        .map(|&id| {
            let rs: Vec<&InjectionRecord> = records.iter().filter(|r| r.spec.param_set == id).collect();
            let rates: Vec<f64> = rs.iter().map(|r| r.pixel_change_rate).collect();
            let (mean_rate, std_rate) = mean_std(&rates);
            SetStats {
                set_id: id.to_string(),
                layer: rs[0].layer.clone(),
                kind: rs[0].kind,
                n: rs.len(),
                mean_rate,
                std_rate,
                critical_fraction: fraction(rs.iter().map(|r| r.critical), rs.len()),
            }
        })
        .collect();
    let all: Vec<f64> = records.iter().map(|r| r.pixel_change_rate).collect();
    let (model_mean_rate, _) = mean_std(&all);
    let group_means: Vec<f64> = groups.iter().map(|g| g.mean_rate).collect();
    let (_, model_std_rate) = mean_std(&group_means);
    Ok(VulnerabilityReport {
        groups,
        sets,
        injections: records.len(),
        model_mean_rate,
        model_std_rate,
        model_critical_fraction: fraction(records.iter().map(|r| r.critical), records.len()),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

pub const RECORD_COLUMNS: [&str; 11] = [
    "set_id",
    "kind",
    "layer",
    "element_index",
    "bit",
    "orig_bits_hex",
    "new_bits_hex",
    "pixel_change_rate",
    "critical",
    "nonfinite",
    "saturated",
];

pub fn write_records_csv(path: &Path, records: &[InjectionRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let per_image = records.iter().any(|r| r.per_image_rates.is_some());
    let mut header: Vec<&str> = RECORD_COLUMNS.to_vec();
    if per_image {
        header.push("per_image_rates");
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.spec.param_set.clone(),
            r.kind.tag().to_string(),
            r.layer.clone(),
            r.spec.element.to_string(),
            r.spec.bit.to_string(),
            r.spec.domain.hex(r.original_bits),
            r.spec.domain.hex(r.new_bits),
            r.pixel_change_rate.to_string(),
            r.critical.to_string(),
            r.nonfinite.to_string(),
            r.saturated.to_string(),
        ];
        if per_image {
            row.push(
                r.per_image_rates
                    .as_deref()
                    .unwrap_or_default()
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(";"),
            );
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a records file written by [`write_records_csv`] for `plan`. Rows
/// must follow plan order; domains come from the plan.
pub fn read_records_csv(path: &Path, plan: &FaultPlan) -> Result<Vec<InjectionRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("missing column `{name}`"),
        })
    };
    let idx: Vec<usize> = RECORD_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let per_image = headers.iter().position(|h| h == "per_image_rates");
    let bad = |row: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg: format!("row {row}: {msg}"),
    };
    let groups = plan.group_of_spec();
    let mut specs = plan.specs();
    let mut out = Vec::with_capacity(plan.len());
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| &rec[idx[k]];
        let Some(spec) = specs.next() else {
            return Err(Error::PlanMismatch {
                expected: format!("{} records", plan.len()),
                actual: format!("more than {}", plan.len()),
            });
        };
        let g = &plan.groups[groups[row]];
        let element: usize = field(3).parse().map_err(|e| bad(row, format!("element_index: {e}")))?;
        let bit: u32 = field(4).parse().map_err(|e| bad(row, format!("bit: {e}")))?;
        if field(0) != spec.param_set || element != spec.element || bit != spec.bit {
            return Err(Error::PlanMismatch {
                expected: format!("{}[{}] bit {}", spec.param_set, spec.element, spec.bit),
                actual: format!("{}[{element}] bit {bit}", field(0)),
            });
        }
        let hex = |k: usize| u32::from_str_radix(field(k), 16).map_err(|e| bad(row, format!("{}: {e}", RECORD_COLUMNS[k])));
        let flag = |k: usize| field(k).parse::<bool>().map_err(|e| bad(row, format!("{}: {e}", RECORD_COLUMNS[k])));
        let per_image_rates = match per_image.map(|c| &rec[c]) {
            None => None,
            Some("") => Some(Vec::new()),
            Some(text) => Some(
                text.split(';')
                    .map(|v| v.parse::<f64>().map_err(|e| bad(row, format!("per_image_rates: {e}"))))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        out.push(InjectionRecord {
            layer: g.layer.clone(),
            kind: g.kind,
            original_bits: hex(5)?,
            new_bits: hex(6)?,
            pixel_change_rate: field(7).parse().map_err(|e| bad(row, format!("pixel_change_rate: {e}")))?,
            critical: flag(8)?,
            nonfinite: flag(9)?,
            saturated: flag(10)?,
            per_image_rates,
            spec,
        });
    }
    if out.len() != plan.len() {
        return Err(Error::PlanMismatch {
            expected: format!("{} records", plan.len()),
            actual: format!("{} records", out.len()),
        });
    }
    Ok(out)
}

/// One row per `(set, bit)` group.
pub fn write_summary_csv(path: &Path, report: &VulnerabilityReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "set_id",
        "kind",
        "layer",
        "domain",
        "bit",
        "n",
        "mean_rate",
        "std_rate",
        "critical_fraction",
        "nonfinite_fraction",
        "saturated_fraction",
    ])?;
    for g in &report.groups {
        w.write_record([
            g.set_id.clone(),
            g.kind.tag().to_string(),
            g.layer.clone(),
            g.domain.to_string(),
            g.bit.to_string(),
            g.n.to_string(),
            g.mean_rate.to_string(),
            g.std_rate.to_string(),
            g.critical_fraction.to_string(),
            g.nonfinite_fraction.to_string(),
            g.saturated_fraction.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per parameter set.
pub fn write_set_summary_csv(path: &Path, report: &VulnerabilityReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["set_id", "kind", "layer", "n", "mean_rate", "std_rate", "critical_fraction"])?;
    for s in &report.sets {
        w.write_record([
            s.set_id.clone(),
            s.kind.tag().to_string(),
            s.layer.clone(),
            s.n.to_string(),
            s.mean_rate.to_string(),
            s.std_rate.to_string(),
            s.critical_fraction.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
