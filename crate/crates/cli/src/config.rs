use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flipbench_core::fault::{PlanConfig, PopulationUnit, Sizing};
use flipbench_core::metrics::MsbRateSource;
use flipbench_core::model::InitScheme;
use flipbench_core::prune::{Reference, MAX_STEPS};
use flipbench_core::tensor::ActivationKind;

use crate::failure::{config_error, Failure};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub campaign: CampaignSection,
    pub prune: PruneSection,
    pub quantize: QuantizeSection,
    pub report: ReportSection,
    pub io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub levels: usize,
    pub base_filters: usize,
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub activation: ActivationKind,
    pub seed: u64,
    pub init: InitScheme,
    /// Existing fp32 model container; replaces random initialization.
    pub weights: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            levels: 2,
            base_filters: 4,
            input_shape: [16, 16, 3],
            classes: 3,
            activation: ActivationKind::Relu,
            seed: 1,
            init: InitScheme::He,
            weights: None,
        }
    }
}

/// Synthetic evaluation set, used when `io.images` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub seed: u64,
    pub count: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { seed: 7, count: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Fp32,
    Fp32Pruned,
    Int8,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Fp32 => "fp32",
            Variant::Fp32Pruned => "fp32-pruned",
            Variant::Int8 => "int8",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizingMode {
    #[default]
    Statistical,
    Fixed,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSection {
    pub error_margin: f64,
    pub confidence: f64,
    pub failure_prob: f64,
    pub bits: Option<Vec<u32>>,
    pub seed: u64,
    pub variant: Variant,
    pub sizing: SizingMode,
    /// Sample size per unit for `fixed` sizing, or an override of the
    /// statistical size.
    pub n_override: Option<u64>,
    pub unit: PopulationUnit,
    pub sets: Option<Vec<String>>,
    pub per_image_rates: bool,
    /// Uses only the first `images` evaluation images when set.
    pub images: Option<usize>,
}

impl Default for CampaignSection {
    fn default() -> Self {
        CampaignSection {
            error_margin: 0.025,
            confidence: 0.95,
            failure_prob: 0.5,
            bits: None,
            seed: 42,
            variant: Variant::Fp32,
            sizing: SizingMode::Statistical,
            n_override: None,
            unit: PopulationUnit::SetBit,
            sets: None,
            per_image_rates: false,
            images: None,
        }
    }
}

impl CampaignSection {
    pub fn plan_config(&self) -> PlanConfig {
        let sizing = match (self.sizing, self.n_override) {
            (SizingMode::Exhaustive, _) => Sizing::Exhaustive,
            (_, Some(n)) => Sizing::Fixed { n },
            (SizingMode::Fixed, None) => unreachable!("validated"),
            (SizingMode::Statistical, None) => Sizing::Statistical {
                error_margin: self.error_margin,
                confidence: self.confidence,
                failure_prob: self.failure_prob,
            },
        };
        PlanConfig {
            bits: self.bits.clone(),
            sizing,
            unit: self.unit,
            sets: self.sets.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    /// FLOP reduction per iteration, each relative to the previous model.
    pub targets: Vec<f64>,
    /// Ratio steps in tenths swept per layer.
    pub steps: Vec<u8>,
    pub reference: Reference,
    /// Largest tolerated drop of the metric, in points; reported, not enforced.
    pub max_metric_drop: Option<f64>,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            targets: vec![0.5, 0.5],
            steps: (0..=MAX_STEPS).collect(),
            reference: Reference::Golden,
            max_metric_drop: Some(1.5),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeSection {
    /// Calibrates on the first `calibration_images` images; all when unset.
    pub calibration_images: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub msb_rate: MsbRateSource,
    pub range: [f32; 2],
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            msb_rate: MsbRateSource::CriticalFraction,
            range: [1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub output_dir: PathBuf,
    /// Dataset container with the evaluation images and labels.
    pub images: Option<PathBuf>,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            output_dir: PathBuf::from("out"),
            images: None,
        }
    }
}

fn fraction(name: &str, v: f64) -> Result<(), Failure> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(config_error(format!("{name} must lie in (0, 1), got {v}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))
    }

    /// Checks every section against the library preconditions.
    pub fn validate(&self) -> Result<(), Failure> {
        let m = &self.model;
        if m.levels == 0 || m.levels > 16 || m.base_filters == 0 {
            return Err(config_error("model.levels must lie in 1..=16 and model.base_filters be positive"));
        }
        if m.input_shape.contains(&0) {
            return Err(config_error("model.input_shape extents must be positive"));
        }
        if !(2..=256).contains(&m.classes) {
            return Err(config_error("model.classes must lie in 2..=256"));
        }
        let c = &self.campaign;
        fraction("campaign.error_margin", c.error_margin)?;
        fraction("campaign.confidence", c.confidence)?;
        fraction("campaign.failure_prob", c.failure_prob)?;
        if c.sizing == SizingMode::Fixed && c.n_override.is_none() {
            return Err(config_error("campaign.sizing `fixed` needs campaign.n_override"));
        }
        if c.n_override == Some(0) {
            return Err(config_error("campaign.n_override must be positive"));
        }
        if c.bits.as_ref().is_some_and(|b| b.is_empty() || b.iter().any(|&b| b > 31)) {
            return Err(config_error("campaign.bits must be a non-empty list of positions below 32"));
        }
        if c.images == Some(0) {
            return Err(config_error("campaign.images must be positive"));
        }
        let p = &self.prune;
        if p.targets.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(config_error("prune.targets must lie in [0, 1)"));
        }
        if p.steps.iter().any(|&s| s > MAX_STEPS) {
            return Err(config_error(format!("prune.steps must lie in 0..={MAX_STEPS}")));
        }
        if p.max_metric_drop.is_some_and(|d| d < 0.0) {
            return Err(config_error("prune.max_metric_drop must be non-negative"));
        }
        if self.quantize.calibration_images == Some(0) {
            return Err(config_error("quantize.calibration_images must be positive"));
        }
        let [lo, hi] = self.report.range;
        if !(lo >= 0.0 && lo < hi) {
            return Err(config_error("report.range must satisfy 0 <= lo < hi"));
        }
        if self.dataset.count == 0 && self.io.images.is_none() {
            return Err(config_error("dataset.count must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective configuration,
    /// leaving out the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.io.output_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
