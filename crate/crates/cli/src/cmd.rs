use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sarcd_core::association::{assemble_enhanced, confidence_ground_truth, filter_by_confidence};
use sarcd_core::blocks::{Optimizer, ParamStore, ToyMsgNet, ToyNetConfig, ToyRcaNet, TrainConfig};
use sarcd_core::dilation::{align_mono_affine, structure_aware_dilate_with, DilationStats};
use sarcd_core::interpolation::scaffold_interpolate_with;
use sarcd_core::metrics::{evaluate_with, BucketMetrics};
use sarcd_core::synth::{generate_scene, SceneSpec};
use sarcd_core::{Connectivity, EnhancedRadarDepth, EnhancementParams, Execution, Image, RoiLabelMap};

use crate::failure::{CliResult, Failure, Kind, Stage};
use crate::pipeline::{self, PipelineConfig};
use crate::{io, plot};

#[derive(Debug, Parser)]
#[command(name = "sarcd", version, about = "Structure-aware radar depth enhancement")]
pub struct Cli {
    /// Worker threads for data-parallel stages; 1 runs everything sequentially.
    #[arg(long, global = true, env = "SARCD_THREADS", value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Grow ROIs around radar pixels on the monocular map and spread radar depth over them.
    Dilate(DilateArgs),
    /// Derive confidence targets from interpolated LiDAR.
    ConfGt(ConfGtArgs),
    /// Keep dilated pixels whose confidence reaches a threshold.
    Filter(FilterArgs),
    /// Densify a sparse depth map by triangulation.
    Interp(InterpArgs),
    /// Accumulate LiDAR frames of a scene into the current camera.
    Accumulate(AccumulateArgs),
    /// Train a toy network on a scene.
    ToyTrain(ToyTrainArgs),
    /// Run a trained toy network.
    Infer(InferArgs),
    /// Range-bucketed MAE/RMSE against ground truth.
    Evaluate(EvaluateArgs),
    /// Run every stage on a scene and write a JSON report.
    Pipeline(PipelineArgs),
    /// Time dilation on a synthetic frame.
    Bench(BenchArgs),
    /// Render a depth map or a loss curve as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Net {
    Rcanet,
    Msgnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// ROI growth tolerance on monocular depth, metres.
    #[arg(long, default_value_t = 0.2)]
    pub tau1: f64,
    /// Confidence target threshold, metres.
    #[arg(long, default_value_t = 0.4)]
    pub tau2: f64,
    /// Confidence filter threshold.
    #[arg(long, default_value_t = 0.5)]
    pub tau3: f64,
    /// Weight of the interpolated-target depth loss term.
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    /// Chebyshev cap on ROI growth, pixels.
    #[arg(long, default_value_t = 64)]
    pub max_radius: usize,
    /// Pixel connectivity for ROI growth (4 or 8).
    #[arg(long, default_value_t = 4)]
    pub connectivity: u8,
}

impl EnhanceArgs {
    fn params(&self) -> CliResult<EnhancementParams> {
        let p = EnhancementParams {
            tau1: self.tau1,
            tau2: self.tau2,
            tau3: self.tau3,
            lambda: self.lambda,
            max_radius: self.max_radius,
            connectivity: Connectivity::from_count(self.connectivity).stage_as("arguments", Kind::Usage)?,
        };
        p.validate().stage_as("arguments", Kind::Usage)?;
        Ok(p)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene specification JSON; missing fields take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the specification's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DilateArgs {
    #[arg(long)]
    pub radar: PathBuf,
    #[arg(long)]
    pub mono: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub tau1: f64,
    #[arg(long, default_value_t = 64)]
    pub max_radius: usize,
    /// 4 or 8.
    #[arg(long, default_value_t = 4)]
    pub connectivity: u8,
    /// Fit mono to radar scale (least squares) before growing.
    #[arg(long)]
    pub align_mono: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// ROI membership as a 0/1 map.
    #[arg(long)]
    pub roi_out: Option<PathBuf>,
    /// Also write the JSON stats to this file.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfGtArgs {
    #[arg(long)]
    pub ddr: PathBuf,
    #[arg(long)]
    pub dint: PathBuf,
    #[arg(long)]
    pub roi: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub tau2: f64,
    /// Confidence output; its validity mask goes to `<stem>.mask.rdm`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub ddr: PathBuf,
    /// Confidence map; `<stem>.mask.rdm` next to it, if present, gives validity.
    #[arg(long)]
    pub conf: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub tau3: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AccumulateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Frames up to and including the current one.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub frames: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Adam)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// Toy network configuration JSON; defaults when absent.
    #[arg(long)]
    pub net_config: Option<PathBuf>,
}

impl TrainArgs {
    fn train_config(&self) -> CliResult<TrainConfig> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Failure::usage("arguments", format!("learning rate must be positive, got {}", self.lr)));
        }
        let optimizer = match self.optimizer {
            OptimizerKind::Adam => Optimizer::adam(self.lr),
            OptimizerKind::Sgd => Optimizer::Sgd { lr: self.lr },
        };
        Ok(TrainConfig { steps: self.steps, optimizer })
    }
}

fn net_config(path: Option<&Path>) -> CliResult<ToyNetConfig> {
    let cfg = match path {
        Some(p) => io::read_json("net config", p)?,
        None => ToyNetConfig::default(),
    };
    cfg.validate().stage_as("net config", Kind::Usage)?;
    Ok(cfg)
}

#[derive(Debug, Args)]
pub struct ToyTrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_enum)]
    pub net: Net,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Loss curve CSV (`step,loss`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Trained weights; defaults to `<net>.rdw`.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
    /// For msgnet: filter with this trained rcanet instead of the target confidence.
    #[arg(long)]
    pub rcanet_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub enhance: EnhanceArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, value_enum)]
    pub net: Net,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub net_config: Option<PathBuf>,
    /// rcanet: RGB image (PNG).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// rcanet: dilated radar depth.
    #[arg(long)]
    pub ddr: Option<PathBuf>,
    /// msgnet: monocular depth.
    #[arg(long)]
    pub mono: Option<PathBuf>,
    /// msgnet: projected radar depth.
    #[arg(long)]
    pub radar: Option<PathBuf>,
    /// msgnet: filtered dilated radar depth.
    #[arg(long)]
    pub dfr: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated maximum ranges, metres.
    #[arg(long, value_delimiter = ',', default_value = "50,70,80")]
    pub ranges: Vec<f64>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Pipeline configuration JSON; command-line paths override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run both networks with all-zero weights instead of training.
    #[arg(long)]
    pub zero_weights: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1600)]
    pub width: usize,
    #[arg(long, default_value_t = 900)]
    pub height: usize,
    #[arg(long, default_value_t = 50)]
    pub radar_points: usize,
    #[arg(long, default_value_t = 0.2)]
    pub tau1: f64,
    #[arg(long, default_value_t = 64)]
    pub max_radius: usize,
    #[arg(long, default_value_t = 4)]
    pub connectivity: u8,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub repetitions: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the parallel dilation path (single-threaded otherwise).
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "source")]
pub struct PlotSource {
    /// Depth map to render.
    #[arg(long, group = "source")]
    pub depth: Option<PathBuf>,
    /// Loss curve CSV to render.
    #[arg(long, group = "source")]
    pub loss: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub source: PlotSource,
    /// Depth mapped to the top of the colour ramp; defaults to the map maximum.
    #[arg(long)]
    pub max_depth: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------

pub fn run(cli: Cli) -> CliResult<()> {
    let exec = match cli.threads {
        Some(1) => Execution::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n as usize)
                .build_global()
                .map_err(|e| Failure::usage("threads", e.to_string()))?;
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Dilate(a) => dilate(a, exec),
        Command::ConfGt(a) => conf_gt(a),
        Command::Filter(a) => filter(a),
        Command::Interp(a) => interp(a, exec),
        Command::Accumulate(a) => accumulate(a),
        Command::ToyTrain(a) => toy_train(a, exec),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a, exec),
        Command::Pipeline(a) => run_pipeline(a, exec),
        Command::Bench(a) => bench(a, exec),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Failure::data("output", e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => io::read_json("synth", p)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let scene = generate_scene(&spec).stage("synth")?;
    scene.write_dir(&a.out).stage_as("synth", Kind::Data)?;
    eprintln!("wrote {}x{} scene to {}", spec.width, spec.height, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct DilateReport {
    #[serde(flatten)]
    stats: DilationStats,
    tau1: f64,
    connectivity: u8,
    radar_pixels: usize,
    wall_time_s: f64,
}

fn dilate(a: DilateArgs, exec: Execution) -> CliResult<()> {
    const STAGE: &str = "dilate";
    let params = EnhancementParams {
        tau1: a.tau1,
        max_radius: a.max_radius,
        connectivity: Connectivity::from_count(a.connectivity).stage_as(STAGE, Kind::Usage)?,
        ..Default::default()
    };
    params.validate().stage_as(STAGE, Kind::Usage)?;
    let radar = io::read_map(STAGE, &a.radar)?;
    let mut mono = io::read_map(STAGE, &a.mono)?;
    if a.align_mono {
        mono = align_mono_affine(&mono, &radar).stage(STAGE)?.0;
    }
    let t0 = Instant::now();
    let d = structure_aware_dilate_with(&radar, &mono, &params, exec).stage(STAGE)?;
    let wall = t0.elapsed().as_secs_f64();
    io::write_map(STAGE, &d.depth, &a.out)?;
    if let Some(p) = &a.roi_out {
        io::write_map(STAGE, &d.roi.mask().to_depth_map(), p)?;
    }
    let report = DilateReport {
        stats: d.stats,
        tau1: a.tau1,
        connectivity: a.connectivity,
        radar_pixels: radar.valid_count(),
        wall_time_s: wall,
    };
    if let Some(p) = &a.stats {
        io::write_json(STAGE, &report, p)?;
    }
    if d.stats.seeds_skipped > 0 {
        eprintln!("warning: {} radar pixels without monocular depth were skipped", d.stats.seeds_skipped);
    }
    print_json(&report)
}

fn conf_gt(a: ConfGtArgs) -> CliResult<()> {
    const STAGE: &str = "conf-gt";
    if !(a.tau2 > 0.0) {
        return Err(Failure::usage(STAGE, format!("tau2 must be positive, got {}", a.tau2)));
    }
    let ddr = io::read_map(STAGE, &a.ddr)?;
    let dint = io::read_map(STAGE, &a.dint)?;
    let roi = RoiLabelMap::from_mask(io::read_map(STAGE, &a.roi)?.valid_pixels());
    let t = confidence_ground_truth(&ddr, &dint, &roi, a.tau2).stage(STAGE)?;
    io::write_confidence(STAGE, &t.confidence, &a.out)?;
    let positives = t.confidence.values().iter().filter(|v| **v > 0.0).count();
    print_json(&serde_json::json!({
        "roi_pixels": roi.len(),
        "valid_targets": t.confidence.validity().count(),
        "positive_targets": positives,
        "dropped": t.dropped,
    }))
}

fn filter(a: FilterArgs) -> CliResult<()> {
    const STAGE: &str = "filter";
    if !(a.tau3 > 0.0 && a.tau3 < 1.0) {
        return Err(Failure::usage(STAGE, format!("tau3 must lie in (0, 1), got {}", a.tau3)));
    }
    let ddr = io::read_map(STAGE, &a.ddr)?;
    let conf = io::read_confidence(STAGE, &a.conf)?;
    let out = filter_by_confidence(&ddr, &conf, a.tau3).stage(STAGE)?;
    io::write_map(STAGE, &out, &a.out)?;
    print_json(&serde_json::json!({ "dilated_pixels": ddr.valid_count(), "kept_pixels": out.valid_count() }))
}

fn interp(a: InterpArgs, exec: Execution) -> CliResult<()> {
    const STAGE: &str = "interp";
    let sparse = io::read_map(STAGE, &a.input)?;
    let dense = scaffold_interpolate_with(&sparse, exec).stage_as(STAGE, Kind::Data)?;
    io::write_map(STAGE, &dense, &a.out)?;
    print_json(&serde_json::json!({ "nodes": sparse.valid_count(), "covered_pixels": dense.valid_count() }))
}

fn accumulate(a: AccumulateArgs) -> CliResult<()> {
    let scene = pipeline::load_scene(&a.scene)?;
    let acc = pipeline::accumulate(&scene, a.frames as usize)?;
    io::write_map("accumulate", &acc, &a.out)?;
    print_json(&serde_json::json!({
        "frames": (a.frames as usize).min(scene.current_frame + 1),
        "current_only_pixels": scene.lidar_sparse.valid_count(),
        "accumulated_pixels": acc.valid_count(),
    }))
}

fn toy_train(a: ToyTrainArgs, exec: Execution) -> CliResult<()> {
    let params = a.enhance.params()?;
    let train_cfg = a.train.train_config()?;
    let net_cfg = net_config(a.train.net_config.as_deref())?;
    if a.frames == 0 {
        return Err(Failure::usage("arguments", "frames must be at least 1"));
    }
    let scene = pipeline::load_scene(&a.scene)?;
    net_cfg.check_input(scene.spec.width, scene.spec.height).stage_as("arguments", Kind::Usage)?;
    let prep = pipeline::prepare(&scene, &params, false, a.frames, exec)?;
    let (weights, curve, name) = match a.net {
        Net::Rcanet => {
            let net = ToyRcaNet::new(net_cfg).stage("rcanet")?;
            let (w, c) = pipeline::train_rca(&net, &scene, &prep, a.seed, &train_cfg)?;
            (w, c, "rcanet")
        }
        Net::Msgnet => {
            let conf = match &a.rcanet_weights {
                Some(p) => {
                    let rca = ToyRcaNet::new(net_cfg.clone()).stage("rcanet")?;
                    let w = load_weights(p, &rca.params())?;
                    rca.forward(&w, &scene.image, &prep.dilation.depth).stage("rcanet")?
                }
                None => prep.targets.confidence.clone(),
            };
            let dfr = filter_by_confidence(&prep.dilation.depth, &conf, params.tau3).stage("filter")?;
            let er = assemble_enhanced(&scene.radar, &dfr).stage("filter")?;
            let net = ToyMsgNet::new(net_cfg).stage("msgnet")?;
            let (w, c) = pipeline::train_msg(&net, &prep, &er, params.lambda, a.seed, &train_cfg)?;
            (w, c, "msgnet")
        }
    };
    let wpath = a.weights_out.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.rdw")));
    io::ensure_parent("toy-train", &wpath)?;
    weights.write(&wpath).stage_as("toy-train", Kind::Data)?;
    if let Some(p) = &a.report {
        io::write_loss_csv("toy-train", &curve.losses, p)?;
    }
    print_json(&pipeline::TrainingSummary::from(&curve))
}

fn load_weights(path: &Path, specs: &[sarcd_core::blocks::ParamSpec]) -> CliResult<ParamStore> {
    let w = ParamStore::read(path).map_err(|e| Failure::data("weights", format!("{}: {e}", path.display())))?;
    w.check(specs).map_err(|e| Failure::data("weights", format!("{}: {e}", path.display())))?;
    Ok(w)
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str, net: &str) -> CliResult<&'a Path> {
    v.as_deref().ok_or_else(|| Failure::usage("arguments", format!("--{flag} is required for --net {net}")))
}

fn infer(a: InferArgs) -> CliResult<()> {
    const STAGE: &str = "infer";
    let cfg = net_config(a.net_config.as_deref())?;
    match a.net {
        Net::Rcanet => {
            let image_path = need(&a.image, "image", "rcanet")?;
            let ddr = io::read_map(STAGE, need(&a.ddr, "ddr", "rcanet")?)?;
            let image = Image::read_png(image_path).map_err(|e| Failure::data(STAGE, format!("{}: {e}", image_path.display())))?;
            let net = ToyRcaNet::new(cfg).stage(STAGE)?;
            let w = load_weights(&a.weights, &net.params())?;
            let conf = net.forward(&w, &image, &ddr).stage(STAGE)?;
            if conf.values().iter().any(|v| !v.is_finite()) {
                return Err(Failure::new(Kind::Numeric, STAGE, "confidence contains non-finite values"));
            }
            io::write_confidence(STAGE, &conf, &a.out)?;
            print_json(&serde_json::json!({ "valid_pixels": conf.validity().count() }))
        }
        Net::Msgnet => {
            let mono = io::read_map(STAGE, need(&a.mono, "mono", "msgnet")?)?;
            let radar = io::read_map(STAGE, need(&a.radar, "radar", "msgnet")?)?;
            let dfr = io::read_map(STAGE, need(&a.dfr, "dfr", "msgnet")?)?;
            let er = EnhancedRadarDepth::new(radar, dfr).stage(STAGE)?;
            let net = ToyMsgNet::new(cfg).stage(STAGE)?;
            let w = load_weights(&a.weights, &net.params())?;
            let pred = net.forward(&w, &mono, &er).stage(STAGE)?;
            if pred.values().iter().any(|v| !v.is_finite()) {
                return Err(Failure::new(Kind::Numeric, STAGE, "prediction contains non-finite depth"));
            }
            io::write_map(STAGE, &pred, &a.out)?;
            print_json(&serde_json::json!({ "valid_pixels": pred.valid_count() }))
        }
    }
}

fn evaluate(a: EvaluateArgs, exec: Execution) -> CliResult<()> {
    const STAGE: &str = "evaluate";
    if a.ranges.is_empty() || a.ranges.iter().any(|r| !(*r > 0.0)) {
        return Err(Failure::usage(STAGE, format!("ranges must be positive: {:?}", a.ranges)));
    }
    let pred = io::read_map(STAGE, &a.pred)?;
    let gt = io::read_map(STAGE, &a.gt)?;
    let buckets: Vec<BucketMetrics> = a
        .ranges
        .iter()
        .map(|&r| evaluate_with(&pred, &gt, r, exec).stage_as(STAGE, Kind::Data))
        .collect::<CliResult<_>>()?;
    let report = sarcd_core::metrics::EvalReport { buckets };
    if let Some(p) = &a.json {
        io::write_json(STAGE, &report, p)?;
    }
    for b in &report.buckets {
        eprintln!("0-{:<5} m  MAE {:>10.1} mm  RMSE {:>10.1} mm  n={}", b.max_range, b.mae_mm, b.rmse_mm, b.n_pixels);
    }
    print_json(&report)
}

fn run_pipeline(a: PipelineArgs, exec: Execution) -> CliResult<()> {
    let mut cfg: PipelineConfig = match &a.config {
        Some(p) => io::read_json("config", p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.scene {
        cfg.scene = s;
    }
    if let Some(o) = a.out {
        cfg.out = o;
    }
    if a.zero_weights {
        cfg.zero_weights = true;
    }
    let report = pipeline::run(&cfg, exec)?;
    let summary = serde_json::json!({
        "report": cfg.out.join("report.json"),
        "prediction": report.prediction,
        "mono_baseline": report.mono_baseline,
    });
    print_json(&summary)
}

#[derive(Serialize)]
struct BenchReport {
    width: usize,
    height: usize,
    radar_points: usize,
    seeds_grown: usize,
    roi_pixels: usize,
    tau1: f64,
    max_radius: usize,
    execution: Execution,
    repetitions: usize,
    samples_s: Vec<f64>,
    median_s: f64,
    p95_s: f64,
    per_seed_us: f64,
    target_s: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn bench(a: BenchArgs, exec: Execution) -> CliResult<()> {
    const STAGE: &str = "bench";
    let params = EnhancementParams {
        tau1: a.tau1,
        max_radius: a.max_radius,
        connectivity: Connectivity::from_count(a.connectivity).stage_as(STAGE, Kind::Usage)?,
        ..Default::default()
    };
    params.validate().stage_as(STAGE, Kind::Usage)?;
    let spec = SceneSpec { width: a.width, height: a.height, radar_points: a.radar_points, seed: a.seed, ..Default::default() };
    let scene = generate_scene(&spec).stage(STAGE)?;
    let exec = if a.parallel { exec } else { Execution::Sequential };
    let mut samples = Vec::with_capacity(a.repetitions as usize);
    let mut last = None;
    for _ in 0..a.repetitions {
        let t0 = Instant::now();
        let d = structure_aware_dilate_with(&scene.radar, &scene.mono, &params, exec).stage(STAGE)?;
        samples.push(t0.elapsed().as_secs_f64());
        last = Some(d.stats);
    }
    let stats = last.unwrap_or_default();
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let median = quantile(&sorted, 0.5);
    let report = BenchReport {
        width: a.width,
        height: a.height,
        radar_points: scene.radar.valid_count(),
        seeds_grown: stats.seeds_grown,
        roi_pixels: stats.roi_pixels,
        tau1: a.tau1,
        max_radius: a.max_radius,
        execution: exec,
        repetitions: samples.len(),
        samples_s: samples,
        median_s: median,
        p95_s: quantile(&sorted, 0.95),
        per_seed_us: median * 1e6 / stats.seeds_grown.max(1) as f64,
        target_s: 0.5,
    };
    if let Some(p) = &a.json {
        io::write_json(STAGE, &report, p)?;
    }
    print_json(&report)
}

fn plot_cmd(a: PlotArgs) -> CliResult<()> {
    const STAGE: &str = "plot";
    let svg = match (&a.source.depth, &a.source.loss) {
        (Some(p), _) => {
            let m = io::read_map(STAGE, p)?;
            plot::depth_svg(&m, a.max_depth, &p.display().to_string())
        }
        (_, Some(p)) => plot::loss_svg(&io::read_loss_csv(STAGE, p)?, &p.display().to_string()),
        _ => return Err(Failure::usage(STAGE, "one of --depth or --loss is required")),
    };
    io::ensure_parent(STAGE, &a.out)?;
    std::fs::write(&a.out, svg).stage(STAGE)
}
