//! Command-line front end for the colony counting pipeline.
//!
//! Subcommands cover the full path from annotation files to reports:
//! `validate`, `convert`, `tile`, `merge`, `eval-detection`,
//! `eval-counting`, `tune`, `stats`, and `synth`. All outputs are
//! deterministic given the same inputs and seeds. Exit codes: 0 success,
//! 1 data/validation failure, 2 usage error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use plate_core::agar::{parse_agar_with, write_agar, ParseOptions, Parsed, Strictness};
use plate_core::coco::{to_coco, validate_coco};
use plate_core::metrics::{self, APReport, ApIntegration, CountReport};
use plate_core::model::{ColonyClass, Detection, Label, SampleAnnotation};
use plate_core::postprocess::{
    apply_filters, predict_counts, ClassCounts, FilterConfig, NmsMethod, NmsPriority,
};
use plate_core::records::{
    read_jsonl, whole_image_by_sample, windowed_by_sample, write_jsonl, DetectionRecord,
};
use plate_core::stats;
use plate_core::synth::{generate, SynthConfig};
use plate_core::tiler::{
    plan_test_windows, plan_train_patches, ImageExtent, OversizedPolicy, TilingPlan, TrainConfig,
    DEFAULT_PATCH_SIDE,
};
use plate_core::tuner::{
    apply_dual_policy, fit_dual_policy, grid_search, grid_values, GridSpec, ThresholdsFile,
    TuneSample, DEFAULT_SWITCH_COUNT,
};

#[derive(Parser)]
#[command(
    name = "plate-pipeline",
    version,
    about = "Microbial colony counting by detection: annotations, tiling, merging, metrics, tuning"
)]
struct Cli {
    /// On failure, print a machine-readable JSON error report to stdout.
    #[arg(long, global = true)]
    errors_json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse every annotation JSON under a directory and report problems.
    Validate {
        /// Annotation file or directory of .json files.
        annotations: PathBuf,
        /// Fail on count mismatches and unknown fields instead of warning.
        #[arg(long)]
        strict: bool,
    },
    /// Convert annotations to another format.
    Convert {
        #[arg(long, value_enum)]
        to: ConvertFormat,
        #[arg(long)]
        annotations: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Plan training patches or the sliding test grid for one image.
    Tile(TileArgs),
    /// Merge window-local detections into whole-image predictions and
    /// filter them with fitted thresholds.
    Merge(MergeArgs),
    /// Detection metrics: AP per IoU threshold and class, mAP.
    EvalDetection(EvalDetectionArgs),
    /// Counting metrics: MAE, cMAE, sMAPE.
    EvalCounting(EvalCountingArgs),
    /// Grid-search the probability/NMS threshold pair on training data.
    Tune(TuneArgs),
    /// Dataset statistics: subgroup breakdown, size buckets, histograms.
    Stats(StatsArgs),
    /// Generate a synthetic dataset (annotations plus detection files).
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvertFormat {
    Coco,
}

#[derive(Args)]
struct TileArgs {
    #[arg(long, value_enum)]
    mode: TileMode,
    /// Image extent as WIDTHxHEIGHT, e.g. 4000x6000.
    #[arg(long)]
    extent: String,
    /// Patch side in pixels.
    #[arg(long, default_value_t = DEFAULT_PATCH_SIDE)]
    side: u32,
    /// Test-grid overlap in pixels; defaults to side/8.
    #[arg(long)]
    overlap: Option<u32>,
    /// Annotation file or directory (train mode: the boxes to cover).
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    empty_fraction: f64,
    /// Center-and-clip oversized boxes instead of failing.
    #[arg(long)]
    lenient_oversized: bool,
    /// Sample id stamped into a test-mode manifest.
    #[arg(long, default_value_t = 0)]
    sample_id: i64,
    /// Output manifest file (test mode) or directory (train mode).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TileMode {
    Train,
    Test,
}

#[derive(Args)]
struct MergeArgs {
    /// Tiling-plan manifest file, or a directory of manifests.
    #[arg(long)]
    plan: PathBuf,
    /// Window-local detections JSONL.
    #[arg(long)]
    detections: PathBuf,
    /// Fitted thresholds JSON.
    #[arg(long)]
    thresholds: PathBuf,
    /// Apply the general/auxiliary switching policy from the thresholds
    /// file.
    #[arg(long)]
    dual: bool,
    /// Ratio of network input size to window side.
    #[arg(long, default_value_t = 1.0)]
    patch_scale: f64,
    /// Output whole-image detections JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalDetectionArgs {
    /// Ground-truth annotation file or directory.
    #[arg(long)]
    gt: PathBuf,
    /// Whole-image detections JSONL.
    #[arg(long)]
    pred: PathBuf,
    /// IoU thresholds as START:STOP:STEP.
    #[arg(long, default_value = "0.5:0.95:0.05")]
    iou_set: String,
    /// COCO-style 101-point interpolation instead of the trapezoidal rule.
    #[arg(long)]
    interpolated: bool,
    /// Also print an aligned text table (rows: IoU; columns: classes).
    #[arg(long)]
    table: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCountingArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    gt: PathBuf,
    /// Raw merged detections JSONL (pre-filter), so thresholds can be
    /// re-applied per grid point.
    #[arg(long)]
    pred: PathBuf,
    /// Probability grid as START:STOP:STEP.
    #[arg(long, default_value = "0.05:0.95:0.05")]
    prob_grid: String,
    /// NMS grid as START:STOP:STEP (IoU threshold, or sigma for
    /// soft-gaussian).
    #[arg(long, default_value = "0.1:0.9:0.1")]
    nms_grid: String,
    /// sMAPE tiebreak band in percentage points.
    #[arg(long, default_value_t = 0.1)]
    band: f64,
    /// Interpret the band as a fraction of the minimum, in percent.
    #[arg(long)]
    relative_band: bool,
    #[arg(long, value_enum, default_value_t = MethodArg::SoftGaussian)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = PriorityArg::Area)]
    priority: PriorityArg,
    #[arg(long, default_value_t = 0.001)]
    score_floor: f64,
    /// Additionally fit auxiliary thresholds on crowded samples.
    #[arg(long)]
    dual: bool,
    #[arg(long, default_value_t = DEFAULT_SWITCH_COUNT)]
    switch_count: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Hard,
    SoftLinear,
    SoftGaussian,
}

impl From<MethodArg> for NmsMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Hard => NmsMethod::Hard,
            MethodArg::SoftLinear => NmsMethod::SoftLinear,
            MethodArg::SoftGaussian => NmsMethod::SoftGaussian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorityArg {
    Area,
    Score,
}

impl From<PriorityArg> for NmsPriority {
    fn from(p: PriorityArg) -> Self {
        match p {
            PriorityArg::Area => NmsPriority::Area,
            PriorityArg::Score => NmsPriority::Score,
        }
    }
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 10)]
    bucket_width: u32,
    /// Also write the count histogram as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Include a spatial heatmap for this class (requires --extent).
    #[arg(long)]
    heatmap_class: Option<String>,
    /// Plate extent WIDTHxHEIGHT for heatmap normalization.
    #[arg(long)]
    extent: Option<String>,
    #[arg(long, default_value_t = 64)]
    heatmap_resolution: u32,
    #[arg(long, value_enum, default_value_t = HeatmapModeArg::Center)]
    heatmap_mode: HeatmapModeArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeatmapModeArg {
    Center,
    Area,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthesis config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Seed override; takes precedence over the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Additionally write test-grid plans and window-local ideal
    /// detections, so the merge command can be exercised end to end.
    #[arg(long)]
    windowed: bool,
}

/// Marker for failures whose report already went to stdout.
#[derive(Debug)]
struct AlreadyReported;

impl std::fmt::Display for AlreadyReported {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("failure already reported")
    }
}

impl std::error::Error for AlreadyReported {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("PLATE_PIPELINE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if err.is::<AlreadyReported>() => ExitCode::from(1),
        Err(err) => {
            if cli.errors_json {
                let report = serde_json::json!({
                    "error": format!("{err:#}"),
                });
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate {
            annotations,
            strict,
        } => validate(annotations, *strict, cli.errors_json),
        Command::Convert {
            to,
            annotations,
            out,
            strict,
        } => convert(*to, annotations, out.as_deref(), *strict),
        Command::Tile(args) => tile(args),
        Command::Merge(args) => merge(args),
        Command::EvalDetection(args) => eval_detection(args),
        Command::EvalCounting(args) => eval_counting(args),
        Command::Tune(args) => tune(args),
        Command::Stats(args) => stats_cmd(args),
        Command::Synth(args) => synth(args),
    }
}

fn parse_options(strict: bool) -> ParseOptions {
    ParseOptions {
        strictness: if strict {
            Strictness::Strict
        } else {
            Strictness::Lenient
        },
        ..Default::default()
    }
}

/// Load one annotation file or every `.json` file in a directory, in
/// filename order.
fn load_annotations(path: &Path, opts: &ParseOptions) -> Result<Vec<(PathBuf, Parsed)>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)
            .with_context(|| format!("reading directory {}", path.display()))?
        {
            let p = entry?.path();
            if p.is_file() && p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }

    let mut out = Vec::new();
    for file in files {
        let text = std::fs::read_to_string(&file)
            .with_context(|| format!("reading {}", file.display()))?;
        let parsed =
            parse_agar_with(&text, opts).map_err(|e| anyhow!("{}: {e}", file.display()))?;
        out.push((file, parsed));
    }
    Ok(out)
}

fn annotations_by_sample(
    path: &Path,
    opts: &ParseOptions,
) -> Result<BTreeMap<i64, SampleAnnotation>> {
    let mut out = BTreeMap::new();
    for (file, parsed) in load_annotations(path, opts)? {
        let id = parsed.sample.sample_id;
        if out.insert(id, parsed.sample).is_some() {
            bail!("{}: duplicate sample_id {id}", file.display());
        }
    }
    Ok(out)
}

fn parse_extent(text: &str) -> Result<ImageExtent> {
    let (w, h) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!("extent must be WIDTHxHEIGHT, got `{text}`"))?;
    Ok(ImageExtent::new(w.trim().parse()?, h.trim().parse()?)?)
}

fn parse_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        bail!("range must be START:STOP:STEP, got `{text}`");
    }
    Ok(grid_values(
        parts[0].trim().parse()?,
        parts[1].trim().parse()?,
        parts[2].trim().parse()?,
    )?)
}

/// Round every fractional number in a JSON tree to 6 significant digits,
/// so emitted reports are diff-stable.
fn round_report_floats(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.as_i64().is_none() && n.as_u64().is_none() {
                    if let Some(rounded) = serde_json::Number::from_f64(round_sig6(f)) {
                        *value = serde_json::Value::Number(rounded);
                    }
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_report_floats),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_report_floats),
        _ => {}
    }
}

fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(5 - magnitude);
    (x * factor).round() / factor
}

fn emit_report<T: serde::Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    let mut value = serde_json::to_value(report)?;
    round_report_floats(&mut value);
    let text = serde_json::to_string_pretty(&value)?;
    emit_text(&text, out)
}

fn emit_text(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, format!("{text}\n"))
                .with_context(|| format!("writing {}", path.display()))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn validate(path: &Path, strict: bool, errors_json: bool) -> Result<()> {
    let opts = parse_options(strict);

    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_file() && p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }

    let mut errors: Vec<(PathBuf, String)> = Vec::new();
    let mut warnings: Vec<(PathBuf, String)> = Vec::new();
    let mut n_ok = 0usize;
    for file in &files {
        match std::fs::read_to_string(file) {
            Ok(text) => match parse_agar_with(&text, &opts) {
                Ok(parsed) => {
                    n_ok += 1;
                    for w in parsed.warnings {
                        warnings.push((file.clone(), w.to_string()));
                    }
                }
                Err(e) => errors.push((file.clone(), e.to_string())),
            },
            Err(e) => errors.push((file.clone(), e.to_string())),
        }
    }

    if errors_json {
        let report = serde_json::json!({
            "n_files": files.len(),
            "n_valid": n_ok,
            "errors": errors.iter().map(|(p, e)| serde_json::json!({"path": p, "error": e})).collect::<Vec<_>>(),
            "warnings": warnings.iter().map(|(p, w)| serde_json::json!({"path": p, "warning": w})).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for (p, w) in &warnings {
            eprintln!("warning: {}: {w}", p.display());
        }
        for (p, e) in &errors {
            eprintln!("error: {}: {e}", p.display());
        }
        println!(
            "{} samples valid, {} errors, {} warnings",
            n_ok,
            errors.len(),
            warnings.len()
        );
    }

    if errors.is_empty() {
        Ok(())
    } else if errors_json {
        Err(AlreadyReported.into())
    } else {
        bail!(
            "{} of {} annotation files failed validation",
            errors.len(),
            files.len()
        );
    }
}

fn convert(to: ConvertFormat, annotations: &Path, out: Option<&Path>, strict: bool) -> Result<()> {
    let ConvertFormat::Coco = to;
    let samples: Vec<SampleAnnotation> = load_annotations(annotations, &parse_options(strict))?
        .into_iter()
        .map(|(_, p)| p.sample)
        .collect();
    let text = to_coco(&samples)?;
    validate_coco(&text)?;
    emit_text(&text, out)
}

fn tile(args: &TileArgs) -> Result<()> {
    let extent = parse_extent(&args.extent)?;
    match args.mode {
        TileMode::Test => {
            let overlap = args.overlap.unwrap_or(args.side / 8);
            let mut plan = plan_test_windows(extent, args.side, overlap)?;
            plan.sample_id = args.sample_id;
            emit_text(&plan.to_manifest_json(), Some(&args.out))?;
            eprintln!("{} windows planned", plan.windows.len());
        }
        TileMode::Train => {
            let annotations = args
                .annotations
                .as_ref()
                .ok_or_else(|| anyhow!("train mode requires --annotations"))?;
            let cfg = TrainConfig {
                side: args.side,
                seed: args.seed,
                empty_fraction: args.empty_fraction,
                oversized: if args.lenient_oversized {
                    OversizedPolicy::CenterAndClip
                } else {
                    OversizedPolicy::Reject
                },
            };
            std::fs::create_dir_all(&args.out)?;
            for (file, parsed) in load_annotations(annotations, &parse_options(false))? {
                let boxes: Vec<_> = parsed.sample.labels.iter().map(|l| l.bbox).collect();
                let outcome = plan_train_patches(extent, &boxes, &cfg)
                    .map_err(|e| anyhow!("{}: {e}", file.display()))?;
                for w in &outcome.warnings {
                    eprintln!("warning: {}: {w}", file.display());
                }
                let mut plan = outcome.plan;
                plan.sample_id = parsed.sample.sample_id;
                let out = args.out.join(format!("{}.json", parsed.sample.sample_id));
                emit_text(&plan.to_manifest_json(), Some(&out))?;
            }
        }
    }
    Ok(())
}

fn load_plans(path: &Path) -> Result<BTreeMap<i64, TilingPlan>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_file() && p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut out = BTreeMap::new();
    for file in files {
        let text = std::fs::read_to_string(&file)?;
        let plan = TilingPlan::from_manifest_json(&text)
            .map_err(|e| anyhow!("{}: {e}", file.display()))?;
        if out.insert(plan.sample_id, plan).is_some() {
            bail!("duplicate plan for sample {}", file.display());
        }
    }
    Ok(out)
}

fn merge(args: &MergeArgs) -> Result<()> {
    let plans = load_plans(&args.plan)?;
    let thresholds: ThresholdsFile =
        serde_json::from_str(&std::fs::read_to_string(&args.thresholds)?)
            .context("parsing thresholds file")?;
    let template = thresholds.template();
    let general = FilterConfig::new(thresholds.prob_threshold, template);
    general.validate()?;
    let policy = if args.dual {
        Some(
            thresholds
                .dual_policy()
                .ok_or_else(|| anyhow!("--dual requires auxiliary thresholds in the file"))?,
        )
    } else {
        None
    };

    let records = read_jsonl(&std::fs::read_to_string(&args.detections)?)?;
    let by_sample = windowed_by_sample(&records)?;

    let mut out_records = Vec::new();
    for (sample_id, windows) in &by_sample {
        let plan = plans
            .get(sample_id)
            .ok_or_else(|| anyhow!("no tiling plan for sample {sample_id}"))?;
        let raw = plate_core::postprocess::merge_windows(plan, windows, args.patch_scale)?;
        let kept = match &policy {
            Some(p) => apply_dual_policy(p, &raw, &template),
            None => apply_filters(&raw, &general),
        };
        for det in &kept {
            out_records.push(DetectionRecord::from_detection(*sample_id, None, det));
        }
    }
    emit_text(write_jsonl(&out_records).trim_end(), args.out.as_deref())
}

type GtAndPredictions = (
    BTreeMap<i64, SampleAnnotation>,
    BTreeMap<i64, Vec<Detection>>,
);

fn gt_and_predictions(gt_path: &Path, pred_path: &Path) -> Result<GtAndPredictions> {
    let gt = annotations_by_sample(gt_path, &parse_options(false))?;
    let records = read_jsonl(&std::fs::read_to_string(pred_path)?)?;
    let preds = whole_image_by_sample(&records)?;
    Ok((gt, preds))
}

fn eval_detection(args: &EvalDetectionArgs) -> Result<()> {
    let (gt, preds) = gt_and_predictions(&args.gt, &args.pred)?;
    let thresholds = parse_range(&args.iou_set)?;
    let gt_labels: BTreeMap<i64, Vec<Label>> =
        gt.into_iter().map(|(id, s)| (id, s.labels)).collect();
    let integration = if args.interpolated {
        ApIntegration::Interpolated101
    } else {
        ApIntegration::Trapezoid
    };
    let report = metrics::map_report(&gt_labels, &preds, &thresholds, integration)?;
    if args.table {
        println!("{}", ap_table(&report));
    }
    emit_report(&report, args.out.as_deref())
}

/// Aligned text table: rows are IoU thresholds, columns the per-class AP
/// values plus the class-averaged column.
fn ap_table(report: &APReport) -> String {
    let classes: Vec<ColonyClass> = report.per_class.keys().copied().collect();
    let mut out = String::new();
    out.push_str(&format!("{:>6}", "IoU"));
    for c in &classes {
        out.push_str(&format!("{:>15}", c.canonical_name()));
    }
    out.push_str(&format!("{:>10}\n", "all"));
    for (i, t) in report.overall.thresholds.iter().enumerate() {
        out.push_str(&format!("{t:>6.2}"));
        for c in &classes {
            out.push_str(&format!("{:>14.1}%", 100.0 * report.per_class[c].ap[i]));
        }
        out.push_str(&format!("{:>9.1}%\n", 100.0 * report.overall.ap[i]));
    }
    out.push_str(&format!("{:>6}", "mean"));
    for c in &classes {
        out.push_str(&format!("{:>14.1}%", 100.0 * report.per_class[c].mean));
    }
    out.push_str(&format!("{:>9.1}%", 100.0 * report.overall.mean));
    out
}

fn eval_counting(args: &EvalCountingArgs) -> Result<()> {
    let (gt, preds) = gt_and_predictions(&args.gt, &args.pred)?;
    for sample_id in preds.keys() {
        if !gt.contains_key(sample_id) {
            bail!("predictions reference unknown sample {sample_id}");
        }
    }

    // countable samples only; a sample with no prediction entry counts as
    // zero detections
    let empty = Vec::new();
    let mut truth_totals = Vec::new();
    let mut pred_totals = Vec::new();
    let mut truth_counts = Vec::new();
    let mut pred_counts = Vec::new();
    for (id, ann) in gt.iter().filter(|(_, a)| a.colonies_number >= 0) {
        let dets = preds.get(id).unwrap_or(&empty);
        let pc = predict_counts(dets);
        truth_totals.push(ann.colonies_number as u32);
        pred_totals.push(pc.microbe_total());
        truth_counts.push(label_counts(&ann.labels));
        pred_counts.push(pc);
    }
    if truth_totals.is_empty() {
        bail!("no countable samples in the ground truth");
    }

    let per_class = metrics::per_class_mae(&truth_counts, &pred_counts)?;
    let report = CountReport {
        n_samples: truth_totals.len(),
        mae: metrics::mae(&truth_totals, &pred_totals)?,
        smape: metrics::smape(&truth_totals, &pred_totals)?,
        cmae: per_class.values().sum(),
        per_class_mae: per_class,
        k: plate_core::model::MICROBE_CLASSES.len(),
    };
    emit_report(&report, args.out.as_deref())
}

fn label_counts(labels: &[Label]) -> ClassCounts {
    let dets: Vec<Detection> = labels
        .iter()
        .map(|l| Detection::new(l.bbox, l.class, 1.0))
        .collect();
    predict_counts(&dets)
}

fn tune(args: &TuneArgs) -> Result<()> {
    let (gt, preds) = gt_and_predictions(&args.gt, &args.pred)?;
    let empty = Vec::new();
    let dataset: Vec<TuneSample> = gt
        .values()
        .filter_map(|ann| {
            TuneSample::from_annotation(ann, preds.get(&ann.sample_id).unwrap_or(&empty).clone())
        })
        .collect();

    let grid = GridSpec {
        prob_values: parse_range(&args.prob_grid)?,
        nms_values: parse_range(&args.nms_grid)?,
        tiebreak_band: args.band,
        relative_band: args.relative_band,
    };
    let template = plate_core::postprocess::NmsConfig {
        method: args.method.into(),
        priority: args.priority.into(),
        score_floor: args.score_floor,
        ..Default::default()
    };

    let (general, auxiliary, switch_count) = if args.dual {
        let policy = fit_dual_policy(&grid, &dataset, &template, args.switch_count)?;
        (
            policy.general,
            Some(policy.auxiliary),
            Some(policy.switch_count),
        )
    } else {
        (grid_search(&grid, &dataset, &template)?, None, None)
    };

    let file = ThresholdsFile {
        method: args.method.into(),
        prob_threshold: general.prob_threshold,
        nms_threshold: general.nms_threshold,
        priority: args.priority.into(),
        score_floor: args.score_floor,
        auxiliary,
        switch_count,
    };
    emit_report(&file, args.out.as_deref())
}

fn stats_cmd(args: &StatsArgs) -> Result<()> {
    let samples: Vec<SampleAnnotation> =
        load_annotations(&args.annotations, &parse_options(false))?
            .into_iter()
            .map(|(_, p)| p.sample)
            .collect();

    let summary = stats::summarize(&samples);
    let all_labels: Vec<Label> = samples.iter().flat_map(|s| s.labels.clone()).collect();
    let buckets = stats::size_buckets(&all_labels);
    let histogram = stats::count_histogram(&samples, args.bucket_width)?;

    if let Some(csv_path) = &args.csv {
        let mut csv = String::from("bucket_start,count\n");
        for (start, n) in &histogram.buckets {
            csv.push_str(&format!("{start},{n}\n"));
        }
        emit_text(csv.trim_end(), Some(csv_path))?;
    }

    let heatmap = match &args.heatmap_class {
        Some(name) => {
            let class = plate_core::model::AliasTable::default()
                .resolve(name)
                .map_err(|e| anyhow!("{e}"))?;
            let extent = parse_extent(
                args.extent
                    .as_ref()
                    .ok_or_else(|| anyhow!("--heatmap-class requires --extent"))?,
            )?;
            let data: Vec<(ImageExtent, Vec<Label>)> =
                samples.iter().map(|s| (extent, s.labels.clone())).collect();
            let mode = match args.heatmap_mode {
                HeatmapModeArg::Center => stats::HeatmapAccumulation::Center,
                HeatmapModeArg::Area => stats::HeatmapAccumulation::Area,
            };
            Some(stats::heatmap(&data, class, args.heatmap_resolution, mode)?)
        }
        None => None,
    };

    let mut report = serde_json::json!({
        "summary": summary,
        "size_buckets": buckets,
        "count_histogram": histogram,
    });
    if let Some(h) = heatmap {
        report["heatmap"] = serde_json::to_value(h)?;
    }
    emit_report(&report, args.out.as_deref())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = serde_json::from_str(&std::fs::read_to_string(&args.config)?)
        .context("parsing synth config")?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let samples = generate(&cfg)?;

    let ann_dir = args.out_dir.join("annotations");
    std::fs::create_dir_all(&ann_dir)?;
    let mut ideal = Vec::new();
    let mut noisy = Vec::new();
    for s in &samples {
        let path = ann_dir.join(format!("{}.json", s.annotation.sample_id));
        emit_text(&write_agar(&s.annotation), Some(&path))?;
        for d in &s.ideal_detections {
            ideal.push(DetectionRecord::from_detection(
                s.annotation.sample_id,
                None,
                d,
            ));
        }
        for d in &s.noisy_detections {
            noisy.push(DetectionRecord::from_detection(
                s.annotation.sample_id,
                None,
                d,
            ));
        }
    }
    emit_text(
        write_jsonl(&ideal).trim_end(),
        Some(&args.out_dir.join("detections_ideal.jsonl")),
    )?;
    emit_text(
        write_jsonl(&noisy).trim_end(),
        Some(&args.out_dir.join("detections_noisy.jsonl")),
    )?;

    if args.windowed {
        let plan_dir = args.out_dir.join("plans");
        std::fs::create_dir_all(&plan_dir)?;
        let mut windowed = Vec::new();
        for s in &samples {
            let mut plan = plate_core::tiler::plan_test_windows_default(cfg.plate_extent)?;
            plan.sample_id = s.annotation.sample_id;
            emit_text(
                &plan.to_manifest_json(),
                Some(&plan_dir.join(format!("{}.json", s.annotation.sample_id))),
            )?;
            for (idx, window) in plan.windows.iter().enumerate() {
                for d in &s.ideal_detections {
                    if window.contains(&d.bbox) {
                        let local = plate_core::tiler::image_to_window(window, &d.bbox, 1.0)?;
                        windowed.push(DetectionRecord::from_detection(
                            s.annotation.sample_id,
                            Some(idx),
                            &Detection::new(local, d.class, d.score),
                        ));
                    }
                }
            }
        }
        emit_text(
            write_jsonl(&windowed).trim_end(),
            Some(&args.out_dir.join("detections_windowed_ideal.jsonl")),
        )?;
    }

    eprintln!(
        "wrote {} samples to {}",
        samples.len(),
        args.out_dir.display()
    );
    Ok(())
}
