use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use pec_core::cost::{count_params, model_macs, pconv_cost, reduction_percent, CostReport, CountOptions, PConvCost};
use pec_core::data::{gen_synthetic, load_split, synth_image, DatasetLayout, Sample, Split, SynthConfig};
use pec_core::eval::{
    fps_benchmark, BBox, Detection, EvalConfig, FakeTimer, FpsConfig, FpsReport, GroundTruth, Summary, Timer, WallTimer,
};
use pec_core::eval::{mean_ap_threaded, pr_curve, MapResult};
use pec_core::gradcheck::{run_suite, GradcheckConfig};
use pec_core::graph::{build_model, Model, ModelGraph, ModelOptions, Scale, Topology, Variant};
use pec_core::nn::Weights;
use pec_core::tensor::{Fault, Tensor};
use pec_core::train::{
    check_layout, load_checkpoint, predict_samples, train as run_training, LossWeights, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{load_options, overlay, resolve_seed, usage, CliError, CliResult};
use crate::Common;

/// Published reduction for the s-scale pair, shown next to the computed one.
const REFERENCE_REDUCTION_PERCENT: f64 = 42.58;

fn json<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn emit(text: &str, output: Option<&Path>) -> CliResult<()> {
    match output {
        Some(p) => std::fs::write(p, text).map_err(|e| usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse<T: std::str::FromStr<Err = pec_core::Error>>(s: &str) -> CliResult<T> {
    s.parse::<T>().map_err(CliError::from)
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(usage(format!("unknown split {other:?} (expected train|val|test)"))),
    }
}

fn require_dir(p: &Path, what: &str) -> CliResult<()> {
    if !p.is_dir() {
        return Err(usage(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

// ---------------------------------------------------------------- gen-data

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory (created if needed).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of images (at least 10).
    #[arg(long)]
    images: Option<usize>,
    /// Square image size, a multiple of 32.
    #[arg(long)]
    size: Option<usize>,
    /// Allow shapes to overlap.
    #[arg(long)]
    occlusion: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataOptions {
    pub out: Option<PathBuf>,
    pub images: usize,
    pub size: usize,
    pub occlusion: bool,
    pub seed: Option<u64>,
}

impl Default for GenDataOptions {
    fn default() -> Self {
        GenDataOptions {
            out: None,
            images: 286,
            size: 64,
            occlusion: false,
            seed: None,
        }
    }
}

pub fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut o: GenDataOptions = load_options(a.common.config.as_deref())?;
    overlay!(o, a; images, size, occlusion);
    if a.out.is_some() {
        o.out = a.out.clone();
    }
    o.seed = Some(resolve_seed(a.common.seed, o.seed)?);
    let out = o.out.clone().ok_or_else(|| usage("--out is required"))?;
    let mut cfg = SynthConfig::new(o.images, o.size, o.seed.unwrap_or_default());
    cfg.occlusion = o.occlusion;
    cfg.validate()?;
    let summary =
        gen_synthetic(&cfg, &out).map_err(|e| usage(format!("cannot write dataset to {}: {e}", out.display())))?;
    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a GenDataOptions,
        classes: &'a [String],
        summary: pec_core::data::SynthSummary,
    }
    print!(
        "{}",
        json(&Report {
            config: &o,
            classes: &cfg.catalog.names,
            summary,
        })?
    );
    Ok(())
}

// ----------------------------------------------------------------- analyze

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// baseline | pec
    #[arg(long)]
    model: Option<String>,
    /// s | toy
    #[arg(long)]
    scale: Option<String>,
    /// Override the neck topology: fpn | panet | bifpn.
    #[arg(long)]
    neck: Option<String>,
    /// Square input size for MAC counting, a multiple of 32.
    #[arg(long)]
    input_size: Option<u64>,
    /// Head accounting: dfl (distribution box head) | plain (the executed head).
    #[arg(long)]
    head: Option<String>,
    /// csv | json
    #[arg(long)]
    format: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeOptions {
    pub model: String,
    pub scale: String,
    pub neck: Option<String>,
    pub input_size: u64,
    pub head: String,
    pub format: String,
    pub num_classes: usize,
    pub seed: Option<u64>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            model: "pec".into(),
            scale: "s".into(),
            neck: None,
            input_size: 640,
            head: "dfl".into(),
            format: "csv".into(),
            num_classes: 4,
            seed: None,
        }
    }
}

#[derive(Serialize)]
struct Comparison {
    baseline_params: u64,
    pec_params: u64,
    reduction_percent: f64,
    reference_reduction_percent: f64,
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    config: &'a AnalyzeOptions,
    report: CostReport,
    total_flops: u64,
    pconv: PConvCost,
    comparison: Comparison,
}

fn graph_for(variant: Variant, scale: Scale, neck: Option<Topology>, num_classes: usize) -> CliResult<ModelGraph> {
    let mut opts = ModelOptions::new(variant, scale, num_classes);
    opts.neck = neck;
    Ok(build_model(&opts)?)
}

pub fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    let mut o: AnalyzeOptions = load_options(a.common.config.as_deref())?;
    overlay!(o, a; model, scale, input_size, head, format);
    if a.neck.is_some() {
        o.neck = a.neck.clone();
    }
    o.seed = Some(resolve_seed(a.common.seed, o.seed)?);
    let variant: Variant = parse(&o.model)?;
    let scale: Scale = parse(&o.scale)?;
    let neck: Option<Topology> = o.neck.as_deref().map(parse).transpose()?;
    let counting = match o.head.as_str() {
        "dfl" => CountOptions::dfl(),
        "plain" => CountOptions::plain(),
        other => return Err(usage(format!("unknown head accounting {other:?} (expected dfl|plain)"))),
    };
    if !matches!(o.format.as_str(), "csv" | "json") {
        return Err(usage(format!("unknown format {:?} (expected csv|json)", o.format)));
    }
    let hw = (o.input_size, o.input_size);
    let report = model_macs(&graph_for(variant, scale, neck, o.num_classes)?, hw, counting)?;
    let params =
        |v| -> CliResult<u64> { Ok(count_params(&graph_for(v, scale, None, o.num_classes)?, counting)?.total_params) };
    let (baseline_params, pec_params) = (params(Variant::Baseline)?, params(Variant::Pec)?);
    let comparison = Comparison {
        baseline_params,
        pec_params,
        reduction_percent: reduction_percent(baseline_params, pec_params),
        reference_reduction_percent: REFERENCE_REDUCTION_PERCENT,
    };
    let side = (o.input_size / 8).max(1);
    let pconv = pconv_cost(side, side, 64, 0.25, 3)?;
    let text = if o.format == "json" {
        json(&AnalyzeReport {
            config: &o,
            total_flops: report.total_flops(),
            report,
            pconv,
            comparison,
        })?
    } else {
        let mut s = format!("# config {}\n", serde_json::to_string(&o)?);
        s.push_str(&report.to_csv());
        s.push('\n');
        s.push_str("metric,value\n");
        let _ = writeln!(s, "total_flops,{}", report.total_flops());
        let _ = writeln!(s, "pconv_macs_ratio,{}", pconv.macs_ratio);
        let _ = writeln!(s, "pconv_mem_ratio_dominant,{}", pconv.mem_ratio_dominant);
        let _ = writeln!(s, "pconv_mem_ratio,{}", pconv.mem_ratio);
        let _ = writeln!(s, "baseline_params,{}", comparison.baseline_params);
        let _ = writeln!(s, "pec_params,{}", comparison.pec_params);
        let _ = writeln!(s, "reduction_percent,{:.2}", comparison.reduction_percent);
        let _ = writeln!(
            s,
            "reference_reduction_percent,{:.2}",
            comparison.reference_reduction_percent
        );
        s
    };
    emit(&text, a.output.as_deref())
}

// --------------------------------------------------------------- gradcheck

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Largest accepted relative error.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Finite-difference step.
    #[arg(long)]
    step: Option<f64>,
    /// Entries probed per tensor.
    #[arg(long)]
    samples: Option<usize>,
    /// text | json
    #[arg(long)]
    format: Option<String>,
    /// Test hook: corrupt a backward rule (conv-backward).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    pub step: f64,
    pub samples: usize,
    pub format: String,
    pub inject_fault: Option<String>,
    pub seed: Option<u64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        let d = GradcheckConfig::default();
        GradcheckOptions {
            tolerance: d.tolerance,
            step: d.step,
            samples: d.samples_per_tensor,
            format: "text".into(),
            inject_fault: None,
            seed: None,
        }
    }
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let mut o: GradcheckOptions = load_options(a.common.config.as_deref())?;
    overlay!(o, a; tolerance, step, samples, format);
    if a.inject_fault.is_some() {
        o.inject_fault = a.inject_fault.clone();
    }
    o.seed = Some(resolve_seed(a.common.seed, o.seed)?);
    let fault = match o.inject_fault.as_deref() {
        None => None,
        Some("conv-backward") => Some(Fault::ConvBackward),
        Some(other) => return Err(usage(format!("unknown fault {other:?}"))),
    };
    let cfg = GradcheckConfig {
        tolerance: o.tolerance,
        step: o.step,
        samples_per_tensor: o.samples,
        seed: o.seed.unwrap_or_default(),
        fault,
    };
    let report = run_suite(&cfg)?;
    match o.format.as_str() {
        "json" => {
            #[derive(Serialize)]
            struct Out<'a> {
                config: &'a GradcheckOptions,
                passed: bool,
                report: &'a pec_core::gradcheck::GradcheckReport,
            }
            print!(
                "{}",
                json(&Out {
                    config: &o,
                    passed: report.passed(),
                    report: &report,
                })?
            );
        }
        "text" => {
            println!("# config {}", serde_json::to_string(&o)?);
            print!("{}", report.table());
        }
        other => return Err(usage(format!("unknown format {other:?} (expected text|json)"))),
    }
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = failures
        .iter()
        .map(|f| format!("{} (max rel err {:.3e} in {})", f.name, f.max_rel_err, f.worst))
        .collect();
    Err(CliError::Verification(format!(
        "{} of {} gradient checks failed at tolerance {:e}: {}",
        failures.len(),
        report.results.len(),
        o.tolerance,
        list.join(", ")
    )))
}

// ------------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by gen-data (or laid out the same way).
    #[arg(long)]
    data: Option<PathBuf>,
    /// baseline | pec
    #[arg(long)]
    model: Option<String>,
    /// s | toy
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory for checkpoints and logs (default: DATA/runs/MODEL).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threads for validation mAP.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub data: Option<PathBuf>,
    pub model: String,
    pub scale: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub out: Option<PathBuf>,
    pub threads: usize,
    pub conf_threshold: f64,
    pub loss: LossWeights,
    pub seed: Option<u64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainOptions {
            data: None,
            model: "pec".into(),
            scale: "toy".into(),
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            batch_size: d.batch_size,
            out: None,
            threads: 1,
            conf_threshold: d.conf_threshold,
            loss: d.loss,
            seed: None,
        }
    }
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut o: TrainOptions = load_options(a.common.config.as_deref())?;
    overlay!(o, a; model, scale, epochs, learning_rate, momentum, batch_size, threads);
    if a.data.is_some() {
        o.data = a.data.clone();
    }
    if a.out.is_some() {
        o.out = a.out.clone();
    }
    o.seed = Some(resolve_seed(a.common.seed, o.seed)?);
    let data = o.data.clone().ok_or_else(|| usage("--data is required"))?;
    require_dir(&data, "dataset directory")?;
    let variant: Variant = parse(&o.model)?;
    let scale: Scale = parse(&o.scale)?;
    let manifest = DatasetLayout::new(&data).load_manifest()?;
    let out = o
        .out
        .clone()
        .unwrap_or_else(|| data.join("runs").join(format!("{}-{}", o.model, o.scale)));
    o.out = Some(out.clone());

    let graph = build_model(&ModelOptions::new(variant, scale, manifest.classes.len()))?;
    let model = Model::new(graph)?;
    let train_set = load_split(&data, Split::Train)?;
    let val_set = load_split(&data, Split::Val)?;
    let cfg = TrainConfig {
        learning_rate: o.learning_rate,
        momentum: o.momentum,
        batch_size: o.batch_size,
        epochs: o.epochs,
        seed: o.seed.unwrap_or_default(),
        loss: o.loss,
        conf_threshold: o.conf_threshold,
        eval: EvalConfig::default(),
        threads: o.threads.max(1),
    };
    let outcome = run_training::<f32>(&model, &train_set, &val_set, &cfg, Some(&out), |r| {
        println!(
            "epoch {:>3}/{}  box {:.4}  cls {:.4}  total {:.4}  val mAP@.5 {:.4}  mAP@.5:.95 {:.4}",
            r.epoch, cfg.epochs, r.box_loss, r.cls_loss, r.total, r.val_map50, r.val_map5095
        );
    })?;
    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a TrainOptions,
        model: &'a str,
        train_images: usize,
        val_images: usize,
        best_epoch: usize,
        best_map50: f64,
        log: &'a [pec_core::train::TrainLogRow],
    }
    let report = Report {
        config: &o,
        model: &model.graph.name,
        train_images: train_set.len(),
        val_images: val_set.len(),
        best_epoch: outcome.best_epoch,
        best_map50: outcome.best_map50,
        log: &outcome.rows,
    };
    std::fs::write(out.join("train_report.json"), json(&report)?)?;
    println!(
        "best val mAP@.5 {:.4} at epoch {}; checkpoints in {}",
        outcome.best_map50,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- eval

/// One detection in a predictions file; `image` is the sample stem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image: String,
    pub class_id: usize,
    pub score: f64,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to run on the split.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score a JSON predictions file instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Expected model label; a checkpoint of another model is rejected.
    #[arg(long)]
    model: Option<String>,
    /// train | val | test
    #[arg(long)]
    split: Option<String>,
    /// text | json
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Write the predictions used for scoring to this JSON file.
    #[arg(long)]
    dump_predictions: Option<PathBuf>,
    /// Write per-class PR curves at IoU 0.5 as CSV files into this directory.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub model: Option<String>,
    pub split: String,
    pub format: String,
    pub threads: usize,
    pub eval: EvalConfig,
    pub seed: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            data: None,
            checkpoint: None,
            predictions: None,
            model: None,
            split: "test".into(),
            format: "text".into(),
            threads: 1,
            eval: EvalConfig::default(),
            seed: None,
        }
    }
}

/// Loads a checkpoint and verifies it against the expected model label.
fn load_model(path: &Path, expected: Option<&str>) -> CliResult<(Model, Weights<f32>)> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let (graph, weights) = load_checkpoint::<f32>(path)?;
    if let Some(label) = expected {
        let variant: Variant = parse(label)?;
        let prefix = match variant {
            Variant::Baseline => "baseline-",
            Variant::Pec => "pec-",
        };
        if !graph.name.starts_with(prefix) {
            return Err(usage(format!(
                "checkpoint {} holds model {} but --model {label} was requested",
                path.display(),
                graph.name
            )));
        }
    }
    let model = Model::new(graph)?;
    check_layout(&model, &weights)?;
    Ok((model, weights))
}

fn detections_from_records(records: &[PredictionRecord], samples: &[Sample]) -> CliResult<Vec<Detection>> {
    let index: std::collections::HashMap<&str, usize> =
        samples.iter().enumerate().map(|(i, s)| (s.stem.as_str(), i)).collect();
    records
        .iter()
        .map(|r| {
            let image_id = *index
                .get(r.image.as_str())
                .ok_or_else(|| usage(format!("prediction for unknown image {:?}", r.image)))?;
            let [x1, y1, x2, y2] = r.bbox;
            Ok(Detection {
                bbox: BBox::new(x1, y1, x2, y2),
                class_id: r.class_id,
                score: r.score,
                image_id,
            })
        })
        .collect()
}

fn records_from_detections(dets: &[Detection], samples: &[Sample]) -> Vec<PredictionRecord> {
    dets.iter()
        .map(|d| PredictionRecord {
            image: samples[d.image_id].stem.clone(),
            class_id: d.class_id,
            score: d.score,
            bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let mut o: EvalOptions = load_options(a.common.config.as_deref())?;
    overlay!(o, a; split, format, threads);
    for (dst, src) in [
        (&mut o.data, &a.data),
        (&mut o.checkpoint, &a.checkpoint),
        (&mut o.predictions, &a.predictions),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    if a.model.is_some() {
        o.model = a.model.clone();
    }
    o.seed = Some(resolve_seed(a.common.seed, o.seed)?);
    o.eval.validate()?;
    let data = o.data.clone().ok_or_else(|| usage("--data is required"))?;
    require_dir(&data, "dataset directory")?;
    let split = parse_split(&o.split)?;
    let samples = load_split(&data, split)?;
    let classes = DatasetLayout::new(&data).load_manifest()?.classes;

    let (dets, params) = match (&o.predictions, &o.checkpoint) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read predictions {}: {e}", p.display())))?;
            let records: Vec<PredictionRecord> =
                serde_json::from_str(&text).map_err(|e| usage(format!("invalid predictions {}: {e}", p.display())))?;
            (detections_from_records(&records, &samples)?, None)
        }
        (None, Some(ck)) => {
            let (model, weights) = load_model(ck, o.model.as_deref())?;
            if model.graph.num_classes != classes.len() {
                return Err(usage(format!(
                    "checkpoint predicts {} classes but the dataset has {}",
                    model.graph.num_classes,
                    classes.len()
                )));
            }
            let dets = predict_samples(
                &model,
                &weights,
                &samples,
                o.eval.confidence_floor,
                o.eval.nms_iou_threshold,
                16,
            )?;
            (dets, Some(weights.num_params()))
        }
        (None, None) => return Err(usage("either --checkpoint or --predictions is required")),
    };
    if let Some(p) = &a.dump_predictions {
        std::fs::write(p, json(&records_from_detections(&dets, &samples))?)?;
    }
    let gts: Vec<GroundTruth> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.ground_truth(i))
        .collect();
    let result = mean_ap_threaded(&dets, &gts, &o.eval, o.threads.max(1));
    if let Some(dir) = &a.curves {
        std::fs::create_dir_all(dir)?;
        for c in &result.per_class {
            let curve = pr_curve(&dets, &gts, c.class_id, o.eval.match_iou_threshold);
            std::fs::write(dir.join(format!("pr_class{}.csv", c.class_id)), curve.to_csv())?;
        }
    }
    let mut summary = Summary::from(&result);
    summary.params_millions = params.map(|p| p as f64 / 1e6);
    match o.format.as_str() {
        "json" => {
            #[derive(Serialize)]
            struct Out<'a> {
                config: &'a EvalOptions,
                images: usize,
                summary: Summary,
                classes: &'a [String],
                result: &'a MapResult,
            }
            print!(
                "{}",
                json(&Out {
                    config: &o,
                    images: samples.len(),
                    summary,
                    classes: &classes,
                    result: &result,
                })?
            );
        }
        "text" => {
            println!("# config {}", serde_json::to_string(&o)?);
            println!("images      {}", samples.len());
            println!("P           {:.3}", summary.precision);
            println!("R           {:.3}", summary.recall);
            println!("mAP@.5      {:.3}", summary.map50);
            println!("mAP@.5:.95  {:.3}", summary.map5095);
            print!("{}", result.per_class_csv());
        }
        other => return Err(usage(format!("unknown format {other:?} (expected text|json)"))),
    }
    Ok(())
}

// ------------------------------------------------------------------- bench

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Benchmark a trained checkpoint instead of freshly initialised models.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// baseline | pec | both
    #[arg(long)]
    model: Option<String>,
    /// s | toy
    #[arg(long)]
    scale: Option<String>,
    /// Images per timed repetition.
    #[arg(long)]
    images: Option<usize>,
    /// Square image size, a multiple of 32.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Test hook: pretend every repetition takes this many seconds in total.
    #[arg(long, hide = true)]
    fake_seconds: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub checkpoint: Option<PathBuf>,
    pub model: String,
    pub scale: String,
    pub images: usize,
    pub size: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub fake_seconds: Option<f64>,
    pub seed: Option<u64>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        let d = FpsConfig::default();
        BenchOptions {
            checkpoint: None,
            model: "both".into(),
            scale: "toy".into(),
            images: 100,
            size: 64,
            warmup: d.warmup,
            repeats: d.repeats,
            fake_seconds: None,
            seed: None,
        }
    }
}

fn bench_one(model: &Model, weights: &Weights<f32>, images: &[Tensor<f32>], o: &BenchOptions) -> CliResult<FpsReport> {
    let mut timer: Box<dyn Timer> = match o.fake_seconds {
        Some(total) => Box::new(FakeTimer::spread(total, images.len())),
        None => Box::new(WallTimer),
    };
    let cfg = FpsConfig {
        warmup: o.warmup,
        repeats: o.repeats,
    };
    Ok(fps_benchmark(
        images.len(),
        |i| model.predict(weights, &images[i]).map(|_| ()),
        timer.as_mut(),
        cfg,
    )?)
}

pub fn bench(a: BenchArgs) -> CliResult<()> {
    let mut o: BenchOptions = load_options(a.common.config.as_deref())?;
    overlay!(o, a; model, scale, images, size, warmup, repeats);
    if a.checkpoint.is_some() {
        o.checkpoint = a.checkpoint.clone();
    }
    if a.fake_seconds.is_some() {
        o.fake_seconds = a.fake_seconds;
    }
    o.seed = Some(resolve_seed(a.common.seed, o.seed)?);
    let seed = o.seed.unwrap_or_default();
    if o.fake_seconds.is_some_and(|t| !(t > 0.0)) {
        return Err(usage("--fake-seconds must be positive"));
    }

    let mut models: Vec<(Model, Weights<f32>)> = Vec::new();
    if let Some(ck) = o.checkpoint.clone() {
        let expected = (o.model != "both").then_some(o.model.as_str());
        models.push(load_model(&ck, expected)?);
    } else {
        let scale: Scale = parse(&o.scale)?;
        let variants = match o.model.as_str() {
            "both" => vec![Variant::Baseline, Variant::Pec],
            other => vec![parse::<Variant>(other)?],
        };
        for v in variants {
            let model = Model::new(build_model(&ModelOptions::new(v, scale, 4))?)?;
            let weights = model.init(&mut ChaCha8Rng::seed_from_u64(seed))?;
            models.push((model, weights));
        }
    }
    let cfg = SynthConfig::new(o.images.max(1), o.size, seed);
    cfg.validate()?;
    let images: Vec<Tensor<f32>> = (0..o.images)
        .map(|i| synth_image(&cfg, i).map(|(img, _)| img.to_tensor()))
        .collect::<Result<_, _>>()?;

    println!("# config {}", serde_json::to_string(&o)?);
    let mut results = Vec::new();
    for (model, weights) in &models {
        let r = bench_one(model, weights, &images, &o)?;
        println!(
            "{:<14} FPS {:.1} ± {:.1}  ({} images × {} runs, {:.3}M params)",
            model.graph.name,
            r.mean,
            r.std,
            r.images,
            r.runs.len(),
            weights.num_params() as f64 / 1e6
        );
        results.push((model.graph.name.clone(), r.mean));
    }
    if let [(a_name, a_fps), (b_name, b_fps)] = results.as_slice() {
        let (fast, slow, ratio) = if b_fps >= a_fps {
            (b_name, a_name, b_fps / a_fps)
        } else {
            (a_name, b_name, a_fps / b_fps)
        };
        println!("ordering: {fast} is {ratio:.2}x the throughput of {slow}");
    }
    Ok(())
}
