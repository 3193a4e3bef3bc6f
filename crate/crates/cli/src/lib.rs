//! Command-line front end: simulate, align, pair, denoise, tune, eval, folds.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use depthpair::eval::{error_heatmap, evaluate_dataset, DatasetMetrics};
use depthpair::filters::{tune_params, Denoiser, FilterDenoiser, FilterKind, FilterParams, ParamGrid, Passthrough};
use depthpair::geometry::{DepthImage, RigidTransform};
use depthpair::groundtruth::{build_paired_dataset, AlignmentResult};
use depthpair::sequence_io::{
    load_paired_dataset, load_sequence, read_depth_png, save_paired_dataset, save_sequence, write_depth_png,
    PairedDataset,
};
use depthpair::simulator::{record_pair, OracleProvider, RigSpec, SceneSpec};
use depthpair::spatial_align::{
    CalibrationConfig, CalibrationReport, ClassicProvider, CorrespondenceProvider, DescentConfig, Direction,
};
use depthpair::stacking::{make_fold_plan, save_fold_plan, TestSplit};
use depthpair::temporal_align::{find_time_shift, CandidateEvaluation, ShiftSearchConfig};
use depthpair::Error;
use log::LevelFilter;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "depthpair",
    version,
    about = "Align paired RGB-D recordings and evaluate depth denoisers"
)]
pub struct Cli {
    /// Worker threads (0 = all available cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Report errors on standard error as JSON lines.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Log verbosity (off, error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the built-in demo scene and rig specs.
    DemoSpecs(DemoSpecsArgs),
    /// Record a synthetic LQ/HQ sequence pair with ground truth.
    Simulate(SimulateArgs),
    /// Estimate the clock offset and HQ -> LQ extrinsic.
    Align(AlignArgs),
    /// Build the paired dataset from an alignment.
    Pair(PairArgs),
    /// Run a filter over a paired dataset's LQ depth.
    Denoise(DenoiseArgs),
    /// Grid-search filter parameters by masked MSE.
    Tune(TuneArgs),
    /// Score predictions (or the raw LQ depth) against the ground truth.
    Eval(EvalArgs),
    /// Split sequence ids into out-of-fold groups.
    Folds(FoldsArgs),
}

#[derive(Debug, Args)]
pub struct DemoSpecsArgs {
    /// Injected clock offset written into the rig.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub delta_ms: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub rig: PathBuf,
    /// Recording length in seconds.
    #[arg(long, default_value_t = 5.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives `lq/`, `hq/` and `truth.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Oracle,
    Classic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerKind {
    /// Gauss-Newton preconditioned descent.
    Gn,
    /// Plain gradient descent.
    Gd,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    pub lq_dir: PathBuf,
    pub hq_dir: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    pub range_ms: f64,
    #[arg(long, default_value_t = 5.0)]
    pub step_ms: f64,
    #[arg(long, default_value_t = 15.0)]
    pub max_gap_ms: f64,
    #[arg(long, value_enum, default_value_t = ProviderKind::Classic)]
    pub provider: ProviderKind,
    /// `truth.json` from `simulate`; required by the oracle provider.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub passes: usize,
    /// Enable Huber weighting with this threshold in pixels.
    #[arg(long)]
    pub huber_px: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub min_corr: usize,
    /// Also try the best offset +- step/2.
    #[arg(long)]
    pub coarse_to_fine: bool,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Gn)]
    pub optimizer: OptimizerKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    pub lq_dir: PathBuf,
    pub hq_dir: PathBuf,
    pub alignment: PathBuf,
    #[arg(long, default_value_t = 15.0)]
    pub max_gap_ms: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterArg {
    Bf,
    Jbf,
    Rgf,
}

impl From<FilterArg> for FilterKind {
    fn from(f: FilterArg) -> Self {
        match f {
            FilterArg::Bf => FilterKind::Bf,
            FilterArg::Jbf => FilterKind::Jbf,
            FilterArg::Rgf => FilterKind::Rgf,
        }
    }
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Paired dataset directory.
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub filter: FilterArg,
    #[arg(long, default_value_t = 2.0)]
    pub sigma_space: f64,
    /// Meters for bf/rgf, intensity units for jbf.
    #[arg(long)]
    pub sigma_range: Option<f64>,
    /// Window radius; defaults to ceil(3 sigma_space).
    #[arg(long)]
    pub radius: Option<u32>,
    #[arg(long, default_value_t = 4)]
    pub iters: usize,
    /// Take the parameters from a `tune` output instead of the flags.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Predictions directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub filter: FilterArg,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 3.0])]
    pub sigma_space: Vec<f64>,
    /// Defaults: 0.01,0.02,0.05,0.1 m for bf/rgf; 5,10,20,40 for jbf.
    #[arg(long, value_delimiter = ',')]
    pub sigma_range: Vec<f64>,
    /// Rolling guidance iterations to try (ignored by bf/jbf).
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4])]
    pub iters: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub dataset: PathBuf,
    /// Predictions directory from `denoise`; the raw LQ depth when omitted.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Also write per-frame absolute-error images.
    #[arg(long)]
    pub heatmap: bool,
    /// Error mapped to white in heatmaps.
    #[arg(long, default_value_t = 50.0)]
    pub heatmap_scale_mm: f64,
    /// Output directory; receives `metrics.csv` and `summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FoldsArgs {
    /// Sequence ids.
    #[arg(required = true)]
    pub ids: Vec<String>,
    #[arg(long, conflicts_with = "test_fraction")]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a command, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Bad flags, unreadable or malformed input files.
    Input(String),
    Output(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Input(m) | CliError::Output(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 0 success, 2 validation, 3 alignment infeasible, 4 divergence, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Output(_) => 1,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(Error::AlignmentInfeasible(_)) => 3,
            CliError::Core(Error::Divergence(_)) => 4,
            CliError::Core(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "validation",
            3 => "alignment_infeasible",
            4 => "divergence",
            _ => "error",
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("malformed {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Output(format!("cannot create {}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::Output(format!("cannot create {}: {e}", path.display())))
}

/// Ground truth written by `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub delta_ms: f64,
    /// HQ -> LQ.
    pub extrinsic: RigidTransform,
    pub alignment: AlignmentResult,
    pub scene: SceneSpec,
    pub rig: RigSpec,
    /// Camera -> world pose of every LQ frame.
    pub lq_poses: Vec<RigidTransform>,
    /// Camera -> world pose of every HQ frame.
    pub hq_poses: Vec<RigidTransform>,
    pub seed: u64,
    pub duration_s: f64,
}

/// Output of `align`; the flattened fields are what `pair` reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentFile {
    #[serde(flatten)]
    pub alignment: AlignmentResult,
    pub provider: String,
    pub report: CalibrationReport,
    pub candidates: Vec<CandidateEvaluation>,
}

/// Written by `denoise` next to the predicted depth PNGs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub denoiser: String,
    pub params: FilterParams,
    pub frames: Vec<PredictionEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub lq_index: usize,
    pub depth: String,
}

/// Written by `tune`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunedParams {
    pub filter: FilterKind,
    pub params: FilterParams,
    pub mse_mm2: f64,
    pub scores: Vec<(FilterParams, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalSummary {
    dataset: String,
    predictions: String,
    #[serde(flatten)]
    metrics: DatasetMetrics,
}

fn demo_specs(a: &DemoSpecsArgs) -> CliResult {
    let rig = RigSpec::demo(a.delta_ms);
    rig.validate()?;
    write_json(&a.out.join("scene.json"), &SceneSpec::demo())?;
    write_json(&a.out.join("rig.json"), &rig)
}

fn simulate(a: &SimulateArgs) -> CliResult {
    let scene: SceneSpec = read_json(&a.scene)?;
    let rig: RigSpec = read_json(&a.rig)?;
    let rec = record_pair(&scene, &rig, a.duration, a.seed)?;
    let truth = TruthFile {
        delta_ms: rig.delta_ms,
        extrinsic: rig.extrinsic,
        alignment: rec.truth.clone(),
        lq_poses: vec![rig.lq_pose; rec.lq.len()],
        hq_poses: vec![rig.hq_pose(); rec.hq.len()],
        scene,
        rig,
        seed: a.seed,
        duration_s: a.duration,
    };
    save_sequence(&rec.lq, a.out.join("lq"))?;
    save_sequence(&rec.hq, a.out.join("hq"))?;
    write_json(&a.out.join("truth.json"), &truth)?;
    log::info!("recorded {} LQ and {} HQ frames", rec.lq.len(), rec.hq.len());
    Ok(())
}

fn align(a: &AlignArgs) -> CliResult {
    if a.passes == 0 {
        return Err(CliError::Input("--passes must be at least 1".into()));
    }
    if let Some(h) = a.huber_px {
        if !(h > 0.0) {
            return Err(CliError::Input("--huber-px must be positive".into()));
        }
    }
    let provider: Box<dyn CorrespondenceProvider> = match a.provider {
        ProviderKind::Classic => Box::new(ClassicProvider::default()),
        ProviderKind::Oracle => {
            let path = a
                .truth
                .as_ref()
                .ok_or_else(|| CliError::Input("--provider oracle requires --truth".into()))?;
            let truth: TruthFile = read_json(path)?;
            Box::new(OracleProvider::new(truth.scene, truth.rig))
        }
    };
    let lq = load_sequence(&a.lq_dir)?;
    let hq = load_sequence(&a.hq_dir)?;
    let cfg = ShiftSearchConfig {
        range_ms: a.range_ms,
        step_ms: a.step_ms,
        max_gap_ms: a.max_gap_ms,
        coarse_to_fine: a.coarse_to_fine,
        calibration: CalibrationConfig {
            passes: a.passes,
            huber_px: a.huber_px,
            min_correspondences: a.min_corr,
            descent: DescentConfig {
                direction: match a.optimizer {
                    OptimizerKind::Gn => Direction::GaussNewton,
                    OptimizerKind::Gd => Direction::Gradient,
                },
                ..DescentConfig::default()
            },
            ..CalibrationConfig::default()
        },
    };
    let result = find_time_shift(&lq, &hq, provider.as_ref(), &cfg)?;
    log::info!(
        "selected shift {:+.1} ms, residual {:.4} px, {} pairs retained",
        result.shift.delta_ms,
        result.residual_px,
        result.mapping.len()
    );
    let file = AlignmentFile {
        alignment: AlignmentResult::from(&result),
        provider: provider.name().to_string(),
        report: result.report,
        candidates: result.candidates,
    };
    write_json(&a.out, &file)
}

fn pair(a: &PairArgs) -> CliResult {
    let lq = load_sequence(&a.lq_dir)?;
    let hq = load_sequence(&a.hq_dir)?;
    let alignment: AlignmentResult = read_json(&a.alignment)?;
    let dataset = build_paired_dataset(&lq, &hq, &alignment, a.max_gap_ms)?;
    log::info!("{} paired records", dataset.len());
    save_paired_dataset(&dataset, &a.out)?;
    Ok(())
}

fn predict(den: &dyn Denoiser, dataset: &PairedDataset) -> CliResult<Vec<DepthImage>> {
    let frames: Vec<_> = dataset.records().iter().map(|r| r.lq.clone()).collect();
    Ok(den.denoise_sequence(&frames)?)
}

fn denoise(a: &DenoiseArgs) -> CliResult {
    let kind = FilterKind::from(a.filter);
    let params = match &a.params {
        Some(path) => {
            let tuned: TunedParams = read_json(path)?;
            if tuned.filter != kind {
                return Err(CliError::Input(format!(
                    "{} holds parameters for `{}`, not `{}`",
                    path.display(),
                    tuned.filter.name(),
                    kind.name()
                )));
            }
            tuned.params
        }
        None => {
            let range = a
                .sigma_range
                .unwrap_or(if kind == FilterKind::Jbf { 10.0 } else { 0.05 });
            let mut p = FilterParams::new(a.sigma_space, range)?;
            if let Some(r) = a.radius {
                p = p.with_radius(r)?;
            }
            p.with_iterations(if kind == FilterKind::Rgf { a.iters } else { 1 })?
        }
    };
    let den = FilterDenoiser::new(kind, params)?;
    let dataset = load_paired_dataset(&a.dataset)?;
    let preds = predict(&den, &dataset)?;

    create_dir(&a.out.join("depth"))?;
    let mut frames = Vec::with_capacity(preds.len());
    for (r, d) in dataset.records().iter().zip(&preds) {
        let name = format!("depth/{:06}.png", r.lq_index);
        write_depth_png(&a.out.join(&name), d)?;
        frames.push(PredictionEntry {
            lq_index: r.lq_index,
            depth: name,
        });
    }
    write_json(
        &a.out.join("manifest.json"),
        &PredictionManifest {
            denoiser: kind.name().to_string(),
            params,
            frames,
        },
    )
}

fn tune(a: &TuneArgs) -> CliResult {
    let kind = FilterKind::from(a.filter);
    let ranges = if a.sigma_range.is_empty() {
        if kind == FilterKind::Jbf {
            vec![5.0, 10.0, 20.0, 40.0]
        } else {
            vec![0.01, 0.02, 0.05, 0.1]
        }
    } else {
        a.sigma_range.clone()
    };
    let grid = ParamGrid {
        sigma_space: a.sigma_space.clone(),
        sigma_range: ranges,
        iterations: if kind == FilterKind::Rgf {
            a.iters.clone()
        } else {
            vec![1]
        },
    }
    .points()?;
    let dataset = load_paired_dataset(&a.dataset)?;
    let result = tune_params(kind, &dataset, &grid)?;
    log::info!("best {:?}: {:.4} mm^2", result.params, result.mse_mm2);
    write_json(
        &a.out,
        &TunedParams {
            filter: kind,
            params: result.params,
            mse_mm2: result.mse_mm2,
            scores: result.scores,
        },
    )
}

fn load_predictions(dir: &Path, dataset: &PairedDataset) -> CliResult<Vec<DepthImage>> {
    let manifest: PredictionManifest = read_json(&dir.join("manifest.json"))?;
    let dims = dataset.intrinsics.dimensions();
    if manifest.frames.len() != dataset.len()
        || manifest
            .frames
            .iter()
            .zip(dataset.records())
            .any(|(f, r)| f.lq_index != r.lq_index)
    {
        return Err(CliError::Input(format!(
            "predictions in {} do not match the dataset's records",
            dir.display()
        )));
    }
    Ok(manifest
        .frames
        .iter()
        .map(|f| read_depth_png(&dir.join(&f.depth), dims))
        .collect::<Result<Vec<_>, _>>()?)
}

fn eval(a: &EvalArgs) -> CliResult {
    if !(a.heatmap_scale_mm > 0.0) {
        return Err(CliError::Input("--heatmap-scale-mm must be positive".into()));
    }
    let dataset = load_paired_dataset(&a.dataset)?;
    let (preds, source) = match &a.pred {
        Some(dir) => (load_predictions(dir, &dataset)?, dir.display().to_string()),
        None => (predict(&Passthrough, &dataset)?, "raw".to_string()),
    };
    let metrics = evaluate_dataset(&dataset, &preds)?;
    let heatmaps = if a.heatmap {
        dataset
            .records()
            .iter()
            .zip(&preds)
            .map(|(r, p)| {
                error_heatmap(
                    p,
                    &r.gt_depth,
                    &r.valid_mask(),
                    &r.lq.segmentation(),
                    a.heatmap_scale_mm,
                )
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };

    create_dir(&a.out)?;
    let mut csv = String::from("lq_index,pixels,l1_mm,mse_mm2,rmse_mm\n");
    for f in &metrics.frames {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            f.lq_index, f.pixels, f.l1_mm, f.mse_mm2, f.rmse_mm
        ));
    }
    let csv_path = a.out.join("metrics.csv");
    fs::write(&csv_path, csv).map_err(|e| CliError::Output(format!("cannot write {}: {e}", csv_path.display())))?;
    if !heatmaps.is_empty() {
        create_dir(&a.out.join("heatmaps"))?;
        for (r, img) in dataset.records().iter().zip(&heatmaps) {
            let path = a.out.join(format!("heatmaps/{:06}.png", r.lq_index));
            img.save(&path)
                .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))?;
        }
    }
    log::info!(
        "{} frames: MSE {:.4} mm^2 (RMSE {:.4} mm), L1 {:.4} mm",
        metrics.evaluated_frames,
        metrics.mean_mse_mm2,
        metrics.mean_rmse_mm,
        metrics.mean_l1_mm
    );
    write_json(
        &a.out.join("summary.json"),
        &EvalSummary {
            dataset: a.dataset.display().to_string(),
            predictions: source,
            metrics,
        },
    )
}

fn folds(a: &FoldsArgs) -> CliResult {
    let split = match (a.test_count, a.test_fraction) {
        (_, Some(f)) => TestSplit::Fraction(f),
        (Some(c), None) => TestSplit::Count(c),
        (None, None) => TestSplit::default(),
    };
    let plan = make_fold_plan(&a.ids, split, a.seed)?;
    save_fold_plan(&plan, &a.out)?;
    Ok(())
}

fn dispatch(cmd: &Command) -> CliResult {
    match cmd {
        Command::DemoSpecs(a) => demo_specs(a),
        Command::Simulate(a) => simulate(a),
        Command::Align(a) => align(a),
        Command::Pair(a) => pair(a),
        Command::Denoise(a) => denoise(a),
        Command::Tune(a) => tune(a),
        Command::Eval(a) => eval(a),
        Command::Folds(a) => folds(a),
    }
}

/// Runs a parsed command on a thread pool of the requested size.
pub fn execute(cli: &Cli) -> CliResult {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Input(format!("cannot start {} threads: {e}", cli.threads)))?;
    pool.install(|| dispatch(&cli.command))
}

fn report(err: &CliError, json: bool) {
    if json {
        let line = serde_json::json!({
            "error": err.kind(),
            "exit_code": err.exit_code(),
            "message": err.to_string(),
        });
        eprintln!("{line}");
    } else {
        eprintln!("error: {err}");
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e, cli.json_errors);
            e.exit_code()
        }
    }
}
