use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flipbench_core::campaign::{
    normal_quantile, read_records_csv, required_sample_size, run_campaign, run_golden, summarize,
    write_records_csv, write_set_summary_csv, write_summary_csv, FaultableModel, GoldenResult, RunOptions,
};
use flipbench_core::dataset::{load_dataset, make_synthetic_dataset, save_dataset, Dataset};
use flipbench_core::fault::{gen_fault_plan, FaultPlan};
use flipbench_core::metrics::{
    global_iou, iou_per_class_set, msb_gap, range_ratio_table, weighted_iou, write_msb_gap_csv, ClassMap,
    MsbRateSource, F32_EXPONENT_MSB,
};
use flipbench_core::model::{
    build_unet, count_params_flops, fold_batchnorm, init_weights, load_model, save_model, ModelGraph,
};
use flipbench_core::prune::{iterative_prune, write_allocation_csv, write_sensitivity_csv, Reference};
use flipbench_core::quant::{calibrate, load_quant_model, quantize_model, save_quant_model, QuantModel};
use flipbench_core::tensor::Tensor;

use crate::config::{RunConfig, Variant};
use crate::failure::{config_error, data_error, hash_mismatch, Context, Failure};
use crate::output::{atomic_dir, atomic_file, atomic_json, RunMetadata};

pub const PLAN_FILE: &str = "plan.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Output layout below `io.output_dir`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn quant(&self) -> PathBuf {
        self.root.join("quant")
    }
    pub fn pruned(&self) -> PathBuf {
        self.root.join("pruned")
    }
    pub fn golden(&self, v: Variant) -> PathBuf {
        self.root.join(format!("golden-{}.json", v.tag()))
    }
    pub fn campaign(&self, v: Variant) -> PathBuf {
        self.root.join(format!("campaign-{}", v.tag()))
    }
    pub fn report(&self, v: Variant) -> PathBuf {
        self.root.join(format!("report-{}", v.tag()))
    }
}

pub struct Ctx {
    pub config: RunConfig,
    pub layout: Layout,
    pub config_hash: String,
}

impl Ctx {
    pub fn new(config: RunConfig) -> Result<Self, Failure> {
        config.validate()?;
        Ok(Ctx {
            layout: Layout {
                root: config.io.output_dir.clone(),
            },
            config_hash: config.hash(),
            config,
        })
    }

    fn metadata(&self, command: &'static str, model_hash: String, seed: u64) -> RunMetadata {
        RunMetadata::new(command, self.config_hash.clone(), model_hash, seed)
    }

    fn dataset_dir(&self) -> PathBuf {
        self.config.io.images.clone().unwrap_or_else(|| self.layout.dataset())
    }

    fn dataset(&self) -> Result<Dataset, Failure> {
        let dir = self.dataset_dir();
        if !dir.join("manifest.json").exists() {
            return Err(data_error(format!(
                "no dataset at {}; run `init-model` or set io.images",
                dir.display()
            )));
        }
        let ds = load_dataset(&dir).context(format!("loading dataset {}", dir.display()))?;
        let expected = self.config.model.input_shape;
        if let Some(img) = ds.images.first() {
            if img.shape() != expected {
                return Err(data_error(format!(
                    "dataset images have shape {:?}, model expects {expected:?}",
                    img.shape()
                )));
            }
        }
        Ok(ds)
    }

    /// Evaluation images and labels, limited by `campaign.images`.
    fn eval_set(&self) -> Result<(Vec<Tensor>, Vec<ClassMap>), Failure> {
        let mut ds = self.dataset()?;
        if let Some(n) = self.config.campaign.images {
            ds.images.truncate(n);
            ds.labels.truncate(n);
        }
        if ds.images.is_empty() {
            return Err(data_error("evaluation set is empty"));
        }
        Ok((ds.images, ds.labels))
    }

    fn fp32_model(&self, dir: PathBuf, hint: &str) -> Result<ModelGraph, Failure> {
        if !dir.join("manifest.json").exists() {
            return Err(data_error(format!("no model at {}; run `{hint}` first", dir.display())));
        }
        load_model(&dir).context(format!("loading model {}", dir.display()))
    }

    fn load_variant(&self, v: Variant) -> Result<Loaded, Failure> {
        Ok(match v {
            Variant::Fp32 => Loaded::Fp32(self.fp32_model(self.layout.model(), "init-model")?),
            Variant::Fp32Pruned => Loaded::Fp32(self.fp32_model(self.layout.pruned(), "prune")?),
            Variant::Int8 => {
                let dir = self.layout.quant();
                if !dir.join("manifest.json").exists() {
                    return Err(data_error(format!("no int8 model at {}; run `quantize` first", dir.display())));
                }
                Loaded::Int8(load_quant_model(&dir).context(format!("loading {}", dir.display()))?)
            }
        })
    }
}

pub enum Loaded {
    Fp32(ModelGraph),
    Int8(QuantModel),
}

impl Loaded {
    pub fn fingerprint(&self) -> String {
        match self {
            Loaded::Fp32(m) => m.fingerprint(),
            Loaded::Int8(q) => q.fingerprint(),
        }
    }

    fn golden(&self, images: &[Tensor]) -> Result<GoldenResult, Failure> {
        Ok(match self {
            Loaded::Fp32(m) => run_golden(m, images)?,
            Loaded::Int8(q) => run_golden(q, images)?,
        })
    }
}

pub struct SampleSizeArgs {
    pub margin: f64,
    pub confidence: f64,
    pub p: f64,
    pub population: Option<u64>,
    pub n_override: Option<u64>,
}

pub fn sample_size(a: &SampleSizeArgs) -> Result<String, Failure> {
    let n = required_sample_size(a.population, a.margin, a.confidence, a.p)?;
    let t = normal_quantile(a.confidence)?;
    let mut out = String::new();
    match a.n_override {
        Some(0) => return Err(config_error("--n-override must be positive")),
        Some(o) => out.push_str(&format!("n = {o} (override; formula gives {n})\n")),
        None => out.push_str(&format!("n = {n}\n")),
    }
    let population = a.population.map_or("infinite".to_string(), |p| p.to_string());
    out.push_str(&format!("population = {population}\n"));
    out.push_str(&format!("error_margin = {}\n", a.margin));
    out.push_str(&format!("confidence = {}\n", a.confidence));
    out.push_str(&format!("t = {t:.6}\n"));
    out.push_str(&format!("failure_prob = {}\n", a.p));
    Ok(out)
}

#[derive(Serialize)]
struct InitSidecar<'a> {
    metadata: RunMetadata,
    levels: usize,
    base_filters: usize,
    input_shape: [usize; 3],
    classes: usize,
    activation: String,
    params: u64,
    flops: u64,
    conv_flops: u64,
    dataset: &'a Path,
}

pub fn init_model(ctx: &Ctx) -> Result<String, Failure> {
    let m = &ctx.config.model;
    let model = match &m.weights {
        Some(dir) => {
            let model = load_model(dir).context(format!("loading weights {}", dir.display()))?;
            if model.input_shape() != m.input_shape || model.meta().classes != m.classes {
                return Err(config_error(format!(
                    "weights {} have input {:?} and {} classes, config says {:?} and {}",
                    dir.display(),
                    model.input_shape(),
                    model.meta().classes,
                    m.input_shape,
                    m.classes
                )));
            }
            model
        }
        None => {
            let skeleton = build_unet(m.levels, m.base_filters, m.input_shape, m.classes, m.activation)
                .map_err(config_error)?;
            init_weights(&skeleton, m.seed, m.init)
        }
    };
    let root = &ctx.layout.root;
    atomic_dir(&ctx.layout.model(), |dir| Ok(save_model(&model, dir)?))?;
    if ctx.config.io.images.is_none() {
        let d = &ctx.config.dataset;
        let ds = make_synthetic_dataset(d.seed, d.count, m.input_shape, m.classes)?;
        atomic_dir(&ctx.layout.dataset(), |dir| Ok(save_dataset(&ds, dir)?))?;
    }
    let acc = count_params_flops(&model, model.input_shape())?;
    let mut metadata = ctx.metadata("init-model", model.fingerprint(), m.seed);
    metadata.add(root, &ctx.layout.model().join("manifest.json"))?;
    let dataset = ctx.dataset_dir();
    atomic_json(
        &root.join("init-model.json"),
        &InitSidecar {
            metadata,
            levels: m.levels,
            base_filters: m.base_filters,
            input_shape: model.input_shape(),
            classes: model.meta().classes,
            activation: model.meta().activation.to_string(),
            params: acc.params,
            flops: acc.flops,
            conv_flops: acc.conv_flops,
            dataset: &dataset,
        },
    )?;
    Ok(format!(
        "model {} params={} flops={}\n",
        model.fingerprint(),
        acc.params,
        acc.flops
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub global_iou: f64,
    pub weighted_iou: f64,
    pub wiou_weights: Vec<f64>,
    pub wiou_frequencies: String,
}

fn quality(preds: &[ClassMap], labels: &[ClassMap]) -> Result<Option<QualityMetrics>, Failure> {
    if labels.is_empty() {
        return Ok(None);
    }
    let w = weighted_iou(preds, labels, None)?;
    Ok(Some(QualityMetrics {
        per_class_iou: iou_per_class_set(preds, labels)?,
        global_iou: global_iou(preds, labels)?,
        weighted_iou: w.value,
        wiou_weights: w.weights,
        wiou_frequencies: "ground-truth pixel counts of the evaluation set".into(),
    }))
}

#[derive(Serialize, Deserialize)]
struct GoldenFile {
    model_hash: String,
    variant: Variant,
    images: usize,
    quality: Option<QualityMetrics>,
    golden: GoldenResult,
}

#[derive(Serialize)]
struct GoldenSidecar<'a> {
    metadata: RunMetadata,
    #[serde(flatten)]
    body: &'a GoldenFile,
}

pub fn golden(ctx: &Ctx, variant: Variant) -> Result<String, Failure> {
    let model = ctx.load_variant(variant)?;
    let (images, labels) = ctx.eval_set()?;
    let golden = model.golden(&images)?;
    let body = GoldenFile {
        model_hash: model.fingerprint(),
        variant,
        images: images.len(),
        quality: quality(&golden.maps, &labels)?,
        golden,
    };
    let metadata = ctx.metadata("golden", body.model_hash.clone(), ctx.config.campaign.seed);
    atomic_json(&ctx.layout.golden(variant), &GoldenSidecar { metadata, body: &body })?;
    let q = body
        .quality
        .as_ref()
        .map_or(String::new(), |q| format!(" giou={:.4} wiou={:.4}", q.global_iou, q.weighted_iou));
    Ok(format!("golden {} images={}{q}\n", variant.tag(), body.images))
}

#[derive(Serialize)]
struct QuantSetInfo {
    id: String,
    width: u32,
    scale: f32,
    zero_point: i32,
}

#[derive(Serialize)]
struct QuantizeSidecar {
    metadata: RunMetadata,
    source_model_hash: String,
    calibration_images: usize,
    sets: Vec<QuantSetInfo>,
}

pub fn quantize(ctx: &Ctx) -> Result<String, Failure> {
    let model = ctx.fp32_model(ctx.layout.model(), "init-model")?;
    let mut ds = ctx.dataset()?;
    if let Some(n) = ctx.config.quantize.calibration_images {
        ds.images.truncate(n);
    }
    if ds.images.is_empty() {
        return Err(data_error("no calibration images"));
    }
    let folded = fold_batchnorm(&model)?;
    let calib = calibrate(&folded, &ds.images)?;
    let qm = quantize_model(&folded, &calib)?;
    atomic_dir(&ctx.layout.quant(), |dir| Ok(save_quant_model(&qm, dir)?))?;
    let mut metadata = ctx.metadata("quantize", qm.fingerprint(), 0);
    metadata.add(&ctx.layout.root, &ctx.layout.quant().join("manifest.json"))?;
    let sets = qm
        .sets()
        .iter()
        .map(|s| QuantSetInfo {
            id: s.id.clone(),
            width: s.tensor.width,
            scale: s.tensor.scale(),
            zero_point: s.tensor.zero_point(),
        })
        .collect();
    atomic_json(
        &ctx.layout.root.join("quantize.json"),
        &QuantizeSidecar {
            metadata,
            source_model_hash: model.fingerprint(),
            calibration_images: ds.images.len(),
            sets,
        },
    )?;
    Ok(format!("int8 model {} sets={}\n", qm.fingerprint(), qm.sets().len()))
}

#[derive(Serialize)]
struct PruneIterationInfo {
    target: f64,
    reduction: f64,
    base_flops: u64,
    pruned_flops: u64,
    baseline_metric: f64,
    metric_after: f64,
    metric_drop: f64,
    ratios: Vec<(String, u8)>,
    skipped: Vec<String>,
}

#[derive(Serialize)]
struct PruneSidecar {
    metadata: RunMetadata,
    source_model_hash: String,
    reference: Reference,
    total_reduction: f64,
    original_flops: u64,
    pruned_flops: u64,
    max_metric_drop: Option<f64>,
    /// Whether every iteration stayed within `max_metric_drop`.
    gate_passed: Option<bool>,
    iterations: Vec<PruneIterationInfo>,
}

pub fn prune(ctx: &Ctx) -> Result<String, Failure> {
    let p = &ctx.config.prune;
    let model = ctx.fp32_model(ctx.layout.model(), "init-model")?;
    let ds = ctx.dataset()?;
    let labels = match p.reference {
        Reference::Golden => None,
        Reference::Labels if ds.labels.is_empty() => {
            return Err(config_error("prune.reference `labels` needs a dataset with labels"));
        }
        Reference::Labels => Some(ds.labels.as_slice()),
    };
    let (pruned, log) = iterative_prune(&model, &ds.images, labels, &p.targets, &p.steps)?;
    let root = &ctx.layout.root;
    atomic_dir(&ctx.layout.pruned(), |dir| Ok(save_model(&pruned, dir)?))?;
    let mut metadata = ctx.metadata("prune", pruned.fingerprint(), 0);
    metadata.add(root, &ctx.layout.pruned().join("manifest.json"))?;

    let mut current = model.clone();
    let mut iterations = Vec::with_capacity(log.len());
    for (k, it) in log.iter().enumerate() {
        let sens = root.join(format!("sensitivity-{k}.csv"));
        atomic_file(&sens, |tmp| Ok(write_sensitivity_csv(tmp, &it.table)?))?;
        metadata.add(root, &sens)?;
        let alloc = root.join(format!("allocation-{k}.csv"));
        atomic_file(&alloc, |tmp| Ok(write_allocation_csv(tmp, &current, &it.allocation)?))?;
        metadata.add(root, &alloc)?;
        current = flipbench_core::prune::prune_channels(&current, &it.allocation.ratios)?;
        iterations.push(PruneIterationInfo {
            target: it.allocation.target,
            reduction: it.allocation.reduction,
            base_flops: it.allocation.base_flops,
            pruned_flops: it.allocation.pruned_flops,
            baseline_metric: it.table.baseline,
            metric_after: it.metric_after,
            metric_drop: it.table.baseline - it.metric_after,
            ratios: it.allocation.ratios.clone(),
            skipped: it.table.skipped.clone(),
        });
    }
    let original_flops = count_params_flops(&model, model.input_shape())?.flops;
    let pruned_flops = count_params_flops(&pruned, pruned.input_shape())?.flops;
    let total_reduction = 1.0 - pruned_flops as f64 / original_flops as f64;
    let gate_passed = p
        .max_metric_drop
        .map(|max| iterations.iter().all(|i| i.metric_drop <= max));
    if gate_passed == Some(false) {
        log::warn!("pruning exceeded the configured metric drop of {:?} points", p.max_metric_drop);
    }
    atomic_json(
        &root.join("prune.json"),
        &PruneSidecar {
            metadata,
            source_model_hash: model.fingerprint(),
            reference: p.reference,
            total_reduction,
            original_flops,
            pruned_flops,
            max_metric_drop: p.max_metric_drop,
            gate_passed,
            iterations,
        },
    )?;
    Ok(format!(
        "pruned model {} flops {original_flops} -> {pruned_flops} (reduction {total_reduction:.4})\n",
        pruned.fingerprint()
    ))
}

fn load_golden(ctx: &Ctx, variant: Variant, model: &Loaded, images: &[Tensor]) -> Result<GoldenResult, Failure> {
    let path = ctx.layout.golden(variant);
    if !path.exists() {
        return model.golden(images);
    }
    let text = std::fs::read_to_string(&path).context(format!("reading {}", path.display()))?;
    let file: GoldenFile =
        serde_json::from_str(&text).map_err(|e| data_error(format!("golden file {}: {e}", path.display())))?;
    let hash = model.fingerprint();
    if file.model_hash != hash {
        return Err(hash_mismatch("golden file", &file.model_hash, &hash));
    }
    if file.golden.maps.len() != images.len() {
        return Err(data_error(format!(
            "golden file covers {} images, evaluation set has {}",
            file.golden.maps.len(),
            images.len()
        )));
    }
    Ok(file.golden)
}

#[derive(Serialize)]
struct CampaignSidecar<'a> {
    metadata: RunMetadata,
    variant: Variant,
    images: usize,
    injections: usize,
    plan_config: &'a flipbench_core::fault::PlanConfig,
    population_unit: flipbench_core::fault::PopulationUnit,
    model_mean_rate: f64,
    model_std_rate: f64,
    model_critical_fraction: f64,
}

pub fn campaign(ctx: &Ctx, variant: Variant, plan_path: Option<&Path>) -> Result<String, Failure> {
    let c = &ctx.config.campaign;
    let model = ctx.load_variant(variant)?;
    let (images, _) = ctx.eval_set()?;
    let golden = load_golden(ctx, variant, &model, &images)?;
    let hash = model.fingerprint();
    let plan = match plan_path {
        Some(p) => {
            let plan = read_plan(p)?;
            if plan.model_hash != hash {
                return Err(hash_mismatch("fault plan", &plan.model_hash, &hash));
            }
            plan
        }
        None => {
            let sets = match &model {
                Loaded::Fp32(m) => m.target_sets(),
                Loaded::Int8(q) => q.target_sets(),
            };
            gen_fault_plan(&sets, &hash, &c.plan_config(), c.seed)?
        }
    };
    let options = RunOptions {
        per_image_rates: c.per_image_rates,
    };
    let records = match &model {
        Loaded::Fp32(m) => run_campaign(m, &plan, &images, &golden, options)?,
        Loaded::Int8(q) => run_campaign(q, &plan, &images, &golden, options)?,
    };
    let dir = ctx.layout.campaign(variant);
    let root = &ctx.layout.root;
    let mut metadata = ctx.metadata("campaign", hash, plan.seed);
    atomic_json(&dir.join(PLAN_FILE), &plan)?;
    metadata.add(root, &dir.join(PLAN_FILE))?;
    atomic_file(&dir.join(RECORDS_FILE), |tmp| Ok(write_records_csv(tmp, &records)?))?;
    metadata.add(root, &dir.join(RECORDS_FILE))?;
    let summary = if records.is_empty() {
        log::warn!("fault plan is empty; no summary written");
        None
    } else {
        let s = summarize(&records)?;
        atomic_file(&dir.join(SUMMARY_CSV), |tmp| Ok(write_summary_csv(tmp, &s)?))?;
        metadata.add(root, &dir.join(SUMMARY_CSV))?;
        Some(s)
    };
    let (mean, std, crit) = summary
        .as_ref()
        .map_or((0.0, 0.0, 0.0), |s| (s.model_mean_rate, s.model_std_rate, s.model_critical_fraction));
    atomic_json(
        &dir.join(SUMMARY_JSON),
        &CampaignSidecar {
            metadata,
            variant,
            images: images.len(),
            injections: records.len(),
            plan_config: &plan.config,
            population_unit: plan.config.unit,
            model_mean_rate: mean,
            model_std_rate: std,
            model_critical_fraction: crit,
        },
    )?;
    Ok(format!(
        "campaign {} injections={} mean_rate={mean:.6} critical={crit:.6}\n",
        variant.tag(),
        records.len()
    ))
}

fn read_plan(path: &Path) -> Result<FaultPlan, Failure> {
    let text = std::fs::read_to_string(path).context(format!("reading plan {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| data_error(format!("plan {}: {e}", path.display())))
}

#[derive(Serialize)]
struct ReportSidecar {
    metadata: RunMetadata,
    variant: Variant,
    records: usize,
    groups: usize,
    model_mean_rate: f64,
    model_std_rate: f64,
    model_critical_fraction: f64,
    msb_rate_source: MsbRateSource,
    range: [f32; 2],
    quality: Option<QualityMetrics>,
}

pub fn report(ctx: &Ctx, variant: Variant) -> Result<String, Failure> {
    let model = ctx.load_variant(variant)?;
    let hash = model.fingerprint();
    let cdir = ctx.layout.campaign(variant);
    let plan = read_plan(&cdir.join(PLAN_FILE))?;
    if plan.model_hash != hash {
        return Err(hash_mismatch("fault plan", &plan.model_hash, &hash));
    }
    let records_path = cdir.join(RECORDS_FILE);
    if !records_path.exists() {
        return Err(data_error(format!("no records at {}", records_path.display())));
    }
    let records = read_records_csv(&records_path, &plan)?;
    if records.is_empty() {
        return Err(data_error(format!("{} holds no records", records_path.display())));
    }
    let summary = summarize(&records)?;
    let dir = ctx.layout.report(variant);
    let root = &ctx.layout.root;
    let mut metadata = ctx.metadata("report", hash, plan.seed);
    let groups = dir.join("groups.csv");
    atomic_file(&groups, |tmp| Ok(write_summary_csv(tmp, &summary)?))?;
    metadata.add(root, &groups)?;
    let sets = dir.join("sets.csv");
    atomic_file(&sets, |tmp| Ok(write_set_summary_csv(tmp, &summary)?))?;
    metadata.add(root, &sets)?;

    let r = &ctx.config.report;
    if let Loaded::Fp32(m) = &model {
        if summary.groups.iter().any(|g| g.bit == F32_EXPONENT_MSB) {
            let table = range_ratio_table(m, r.range[0], r.range[1])?;
            let rows = msb_gap(&summary, &table, r.msb_rate)?;
            let gap = dir.join("msb_gap.csv");
            atomic_file(&gap, |tmp| Ok(write_msb_gap_csv(tmp, &rows)?))?;
            metadata.add(root, &gap)?;
        } else {
            log::info!("no exponent-MSB injections; msb_gap.csv not written");
        }
    }
    let golden_path = ctx.layout.golden(variant);
    let quality = if golden_path.exists() {
        let text = std::fs::read_to_string(&golden_path).context(format!("reading {}", golden_path.display()))?;
        let file: GoldenFile = serde_json::from_str(&text)
            .map_err(|e| data_error(format!("golden file {}: {e}", golden_path.display())))?;
        if file.model_hash != metadata.model_hash {
            return Err(hash_mismatch("golden file", &file.model_hash, &metadata.model_hash));
        }
        file.quality
    } else {
        None
    };
    atomic_json(
        &dir.join("report.json"),
        &ReportSidecar {
            metadata,
            variant,
            records: records.len(),
            groups: summary.groups.len(),
            model_mean_rate: summary.model_mean_rate,
            model_std_rate: summary.model_std_rate,
            model_critical_fraction: summary.model_critical_fraction,
            msb_rate_source: r.msb_rate,
            range: r.range,
            quality,
        },
    )?;
    Ok(format!(
        "report {} records={} groups={} mean_rate={:.6}\n",
        variant.tag(),
        records.len(),
        summary.groups.len(),
        summary.model_mean_rate
    ))
}
