//! Segmentation metrics (IoU family) and parameter-range vulnerability
//! analysis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::campaign::VulnerabilityReport;
use crate::error::{Error, Result};
use crate::fault::Domain;
use crate::model::ModelGraph;

/// Per-pixel class indices for one `H × W` image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawClassMap")]
pub struct ClassMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

#[derive(Deserialize)]
struct RawClassMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl TryFrom<RawClassMap> for ClassMap {
    type Error = Error;

    fn try_from(r: RawClassMap) -> Result<Self> {
        ClassMap::new(r.height, r.width, r.classes, r.labels)
    }
}

impl ClassMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("class_map", &[height, width], &[labels.len()]));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::InvalidArgument(format!(
                "class count must be in 1..=256, got {classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::contract(
                "class_map",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Number of pixels whose label differs from `other`.
    pub fn count_changed(&self, other: &ClassMap) -> usize {
        self.labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Intersection and union pixel counts per class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct Overlap {
    inter: Vec<u64>,
    union: Vec<u64>,
    gt_pixels: Vec<u64>,
}

impl Overlap {
    fn new(classes: usize) -> Self {
        Self {
            inter: vec![0; classes],
            union: vec![0; classes],
            gt_pixels: vec![0; classes],
        }
    }

    fn add(&mut self, pred: &ClassMap, gt: &ClassMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width || pred.classes != gt.classes {
            return Err(Error::shape(
                "iou",
                &[pred.height, pred.width, pred.classes],
                &[gt.height, gt.width, gt.classes],
            ));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (p as usize, g as usize);
            self.gt_pixels[g] += 1;
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    fn per_class(&self) -> Vec<Option<f64>> {
        self.inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| 100.0 * i as f64 / u as f64))
            .collect()
    }
}

fn overlap(preds: &[ClassMap], gts: &[ClassMap]) -> Result<Overlap> {
    if preds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if preds.len() != gts.len() {
        return Err(Error::shape("iou", &[preds.len()], &[gts.len()]));
    }
    let mut acc = Overlap::new(preds[0].classes);
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc)
}

/// IoU percentage per class; `None` for classes absent from both maps.
pub fn iou_per_class(pred: &ClassMap, gt: &ClassMap) -> Result<Vec<Option<f64>>> {
    let mut acc = Overlap::new(pred.classes);
    acc.add(pred, gt)?;
    Ok(acc.per_class())
}

/// Per-class IoU with intersections and unions pooled over a whole set.
pub fn iou_per_class_set(preds: &[ClassMap], gts: &[ClassMap]) -> Result<Vec<Option<f64>>> {
    Ok(overlap(preds, gts)?.per_class())
}

/// Micro-averaged IoU: intersections and unions are summed over all classes
/// and images before dividing.
pub fn global_iou(preds: &[ClassMap], gts: &[ClassMap]) -> Result<f64> {
    let acc = overlap(preds, gts)?;
    let inter: u64 = acc.inter.iter().sum();
    let union: u64 = acc.union.iter().sum();
    Ok(100.0 * inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedIou {
    pub value: f64,
    /// Normalized weight per class; zero for excluded classes.
    pub weights: Vec<f64>,
    /// Classes dropped because their frequency was zero.
    pub excluded: Vec<usize>,
}

/// IoU averaged with weights proportional to inverse class frequency. When
/// `frequencies` is `None` they are taken from ground-truth pixel counts of
/// the supplied set.
pub fn weighted_iou(
    preds: &[ClassMap],
    gts: &[ClassMap],
    frequencies: Option<&[f64]>,
) -> Result<WeightedIou> {
    let acc = overlap(preds, gts)?;
    let classes = acc.inter.len();
    let freq: Vec<f64> = match frequencies {
        Some(f) if f.len() != classes => {
            return Err(Error::shape("weighted_iou", &[f.len()], &[classes]));
        }
        Some(f) => f.to_vec(),
        None => acc.gt_pixels.iter().map(|&n| n as f64).collect(),
    };
    let per_class = acc.per_class();
    let mut excluded = Vec::new();
    let mut raw = vec![0.0; classes];
    for c in 0..classes {
        if freq[c] > 0.0 && per_class[c].is_some() {
            raw[c] = 1.0 / freq[c];
        } else {
            log::warn!("weighted IoU: class {c} has zero frequency, excluded");
            excluded.push(c);
        }
    }
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Err(Error::Empty("weighted IoU: no class with positive frequency"));
    }
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let value = weights
        .iter()
        .zip(&per_class)
        .map(|(w, iou)| w * iou.unwrap_or(0.0))
        .sum();
    Ok(WeightedIou {
        value,
        weights,
        excluded,
    })
}

/// Fraction of values whose magnitude lies strictly inside `(lo, hi)`.
pub fn range_ratio(values: &[f32], lo: f32, hi: f32) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("parameter set"));
    }
    let inside = values
        .iter()
        .filter(|v| {
            let a = v.abs();
            lo < a && a < hi
        })
        .count();
    Ok(inside as f64 / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRatioTable {
    pub lo: f32,
    pub hi: f32,
    pub entries: Vec<(String, f64)>,
}

impl RangeRatioTable {
    pub fn get(&self, set_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(id, _)| id == set_id)
            .map(|(_, r)| *r)
    }
}

/// Range ratio of every fp32 parameter set of `model`, in model order.
pub fn range_ratio_table(model: &ModelGraph, lo: f32, hi: f32) -> Result<RangeRatioTable> {
    let entries = model
        .params()
        .iter()
        .map(|p| Ok((p.id.clone(), range_ratio(&p.values, lo, hi)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RangeRatioTable { lo, hi, entries })
}

/// Which per-set statistic of the exponent-MSB injections feeds the gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsbRateSource {
    #[default]
    CriticalFraction,
    MeanPixelRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsbGapRow {
    pub set_id: String,
    pub msb_rate: f64,
    pub range_ratio: f64,
    pub gap: f64,
}

/// Exponent MSB of an IEEE-754 binary32 value.
pub const F32_EXPONENT_MSB: u32 = 30;

/// Difference between the exponent-MSB error rate and the percentage of a
/// set's values in the `(1, 2)` range, per set present in both inputs.
pub fn msb_gap(
    report: &VulnerabilityReport,
    ratios: &RangeRatioTable,
    source: MsbRateSource,
) -> Result<Vec<MsbGapRow>> {
    let rows: Vec<MsbGapRow> = report
        .groups
        .iter()
        .filter(|g| g.bit == F32_EXPONENT_MSB && g.domain == Domain::F32)
        .filter_map(|g| {
            let ratio = ratios.get(&g.set_id)?;
            let msb_rate = match source {
                MsbRateSource::CriticalFraction => 100.0 * g.critical_fraction,
                MsbRateSource::MeanPixelRate => g.mean_rate,
            };
            Some(MsbGapRow {
                set_id: g.set_id.clone(),
                msb_rate,
                range_ratio: ratio,
                gap: msb_rate - 100.0 * ratio,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "report has no fp32 exponent-MSB (bit 30) injections".into(),
        ));
    }
    Ok(rows)
}

pub fn write_msb_gap_csv(path: &Path, rows: &[MsbGapRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["set_id", "msb_rate", "range_ratio", "gap"])?;
    for r in rows {
        w.write_record([
            r.set_id.clone(),
            r.msb_rate.to_string(),
            r.range_ratio.to_string(),
            r.gap.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
