//! Shared stage logic and the end-to-end `pipeline` command.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use sarcd_core::association::{assemble_enhanced, confidence_ground_truth, filter_by_confidence, ConfidenceTargets};
use sarcd_core::blocks::{
    train_msgnet, train_rcanet, ConfidenceSample, DepthSample, LossCurve, ParamStore, ToyMsgNet, ToyNetConfig,
    ToyRcaNet, TrainConfig,
};
use sarcd_core::dilation::{align_mono_affine, structure_aware_dilate_with, AffineFit, Dilation, DilationStats};
use sarcd_core::interpolation::scaffold_interpolate_with;
use sarcd_core::metrics::{evaluate_with, BucketMetrics, DEFAULT_RANGES};
use sarcd_core::projection::{accumulate_lidar, Pose};
use sarcd_core::synth::SceneBundle;
use sarcd_core::{ConfidenceMap, DepthMap, EnhancedRadarDepth, EnhancementParams, Execution};

use crate::failure::{CliResult, Failure, Kind, Stage};
use crate::io;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: PathBuf,
    pub out: PathBuf,
    pub params: EnhancementParams,
    /// Fit mono to radar scale before dilation.
    pub align_mono: bool,
    /// LiDAR frames accumulated up to and including the current one.
    pub frames: usize,
    pub net: ToyNetConfig,
    pub train: TrainConfig,
    /// Skip training and run both networks with all-zero weights.
    pub zero_weights: bool,
    pub seed: u64,
    pub ranges: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: PathBuf::from("scene"),
            out: PathBuf::from("pipeline_out"),
            params: EnhancementParams::default(),
            align_mono: false,
            frames: 5,
            net: ToyNetConfig::default(),
            train: TrainConfig::default(),
            zero_weights: false,
            seed: 7,
            ranges: DEFAULT_RANGES.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> CliResult<()> {
        const STAGE: &str = "config";
        self.params.validate().stage(STAGE)?;
        self.net.validate().stage(STAGE)?;
        if self.frames == 0 {
            return Err(Failure::usage(STAGE, "frames must be at least 1"));
        }
        if self.ranges.is_empty() || self.ranges.iter().any(|r| !(*r > 0.0)) {
            return Err(Failure::usage(STAGE, format!("ranges must be positive: {:?}", self.ranges)));
        }
        if !self.scene.join("scene.json").is_file() {
            return Err(Failure::data(STAGE, format!("no scene.json in {}", self.scene.display())));
        }
        Ok(())
    }
}

pub fn load_scene(dir: &Path) -> CliResult<SceneBundle> {
    SceneBundle::read_dir(dir).map_err(|e| Failure::data("load scene", format!("{}: {e}", dir.display())))
}

/// Accumulate the last `frames` sweeps ending at the current one.
pub fn accumulate(scene: &SceneBundle, frames: usize) -> CliResult<DepthMap> {
    let cur = scene.current_frame;
    let take = frames.min(cur + 1);
    let start = cur + 1 - take;
    accumulate_lidar(&scene.lidar_frames[start..=cur], take - 1, &Pose::IDENTITY, &scene.camera).stage("accumulate")
}

/// Everything derived from a scene before any network runs.
pub struct Prepared {
    pub mono: DepthMap,
    pub affine: Option<AffineFit>,
    pub acc: DepthMap,
    pub int: DepthMap,
    pub dilation: Dilation,
    pub targets: ConfidenceTargets,
}

pub fn prepare(
    scene: &SceneBundle,
    params: &EnhancementParams,
    align: bool,
    frames: usize,
    exec: Execution,
) -> CliResult<Prepared> {
    let (mono, affine) = if align {
        let (m, fit) = align_mono_affine(&scene.mono, &scene.radar).stage("align")?;
        (m, Some(fit))
    } else {
        (scene.mono.clone(), None)
    };
    let acc = accumulate(scene, frames)?;
    let int = scaffold_interpolate_with(&acc, exec).stage("interp")?;
    let dilation = structure_aware_dilate_with(&scene.radar, &mono, params, exec).stage("dilate")?;
    let targets = confidence_ground_truth(&dilation.depth, &int, &dilation.roi, params.tau2).stage("conf-gt")?;
    Ok(Prepared { mono, affine, acc, int, dilation, targets })
}

pub fn train_rca(
    net: &ToyRcaNet,
    scene: &SceneBundle,
    prep: &Prepared,
    seed: u64,
    cfg: &TrainConfig,
) -> CliResult<(ParamStore, LossCurve)> {
    let mut w = net.init(seed);
    let sample = ConfidenceSample {
        image: scene.image.clone(),
        ddr: prep.dilation.depth.clone(),
        targets: prep.targets.confidence.clone(),
    };
    let curve = train_rcanet(net, &mut w, &sample, cfg).stage("train rcanet")?;
    Ok((w, curve))
}

pub fn train_msg(
    net: &ToyMsgNet,
    prep: &Prepared,
    radar: &EnhancedRadarDepth,
    lambda: f64,
    seed: u64,
    cfg: &TrainConfig,
) -> CliResult<(ParamStore, LossCurve)> {
    let mut w = net.init(seed);
    let sample = DepthSample {
        mono: prep.mono.clone(),
        radar: radar.clone(),
        acc: prep.acc.clone(),
        int: prep.int.clone(),
        lambda,
    };
    let curve = train_msgnet(net, &mut w, &sample, cfg).stage("train msgnet")?;
    Ok((w, curve))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub reduction: f64,
}

impl From<&LossCurve> for TrainingSummary {
    fn from(c: &LossCurve) -> Self {
        Self { steps: c.losses.len() - 1, initial_loss: c.initial(), final_loss: c.last(), reduction: c.reduction() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub affine: Option<AffineFit>,
    pub dilation: DilationStats,
    pub radar_pixels: usize,
    pub dilated_pixels: usize,
    pub filtered_pixels: usize,
    pub dropped_targets: usize,
    pub accumulated_pixels: usize,
    pub interpolated_pixels: usize,
    pub rcanet: Option<TrainingSummary>,
    pub msgnet: Option<TrainingSummary>,
    pub prediction: Vec<BucketMetrics>,
    pub mono_baseline: Vec<BucketMetrics>,
}

fn buckets(pred: &DepthMap, gt: &DepthMap, ranges: &[f64], exec: Execution) -> CliResult<Vec<BucketMetrics>> {
    ranges.iter().map(|&r| evaluate_with(pred, gt, r, exec).stage("evaluate")).collect()
}

pub fn run(cfg: &PipelineConfig, exec: Execution) -> CliResult<PipelineReport> {
    cfg.validate()?;
    let out = &cfg.out;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let scene = load_scene(&cfg.scene)?;
    lap("load", &mut timings);
    let prep = prepare(&scene, &cfg.params, cfg.align_mono, cfg.frames, exec)?;
    io::write_map("accumulate", &prep.acc, &out.join("dacc.rdm"))?;
    io::write_map("interp", &prep.int, &out.join("dint.rdm"))?;
    io::write_map("dilate", &prep.dilation.depth, &out.join("ddr.rdm"))?;
    io::write_map("dilate", &prep.dilation.roi.mask().to_depth_map(), &out.join("roi.rdm"))?;
    io::write_confidence("conf-gt", &prep.targets.confidence, &out.join("conf_gt.rdm"))?;
    lap("enhance", &mut timings);

    let rca = ToyRcaNet::new(cfg.net.clone()).stage("rcanet")?;
    let (wr, rca_curve) = if cfg.zero_weights {
        (rca.zeros(), None)
    } else {
        let (w, c) = train_rca(&rca, &scene, &prep, cfg.seed, &cfg.train)?;
        io::write_loss_csv("rcanet", &c.losses, &out.join("loss_rcanet.csv"))?;
        (w, Some(c))
    };
    wr.write(out.join("rcanet.rdw")).stage("rcanet")?;
    let conf: ConfidenceMap = rca.forward(&wr, &scene.image, &prep.dilation.depth).stage("rcanet")?;
    io::write_confidence("rcanet", &conf, &out.join("conf.rdm"))?;
    let dfr = filter_by_confidence(&prep.dilation.depth, &conf, cfg.params.tau3).stage("filter")?;
    io::write_map("filter", &dfr, &out.join("dfr.rdm"))?;
    let er = assemble_enhanced(&scene.radar, &dfr).stage("filter")?;
    lap("rcanet", &mut timings);

    let msg = ToyMsgNet::new(cfg.net.clone()).stage("msgnet")?;
    let (wm, msg_curve) = if cfg.zero_weights {
        (msg.zeros(), None)
    } else {
        let (w, c) = train_msg(&msg, &prep, &er, cfg.params.lambda, cfg.seed, &cfg.train)?;
        io::write_loss_csv("msgnet", &c.losses, &out.join("loss_msgnet.csv"))?;
        (w, Some(c))
    };
    wm.write(out.join("msgnet.rdw")).stage("msgnet")?;
    let pred = msg.forward(&wm, &prep.mono, &er).stage("msgnet")?;
    if pred.values().iter().any(|v| !v.is_finite()) {
        return Err(Failure::new(Kind::Numeric, "msgnet", "prediction contains non-finite depth"));
    }
    io::write_map("msgnet", &pred, &out.join("dhat.rdm"))?;
    lap("msgnet", &mut timings);

    let report = PipelineReport {
        config: cfg.clone(),
        affine: prep.affine,
        dilation: prep.dilation.stats,
        radar_pixels: scene.radar.valid_count(),
        dilated_pixels: prep.dilation.depth.valid_count(),
        filtered_pixels: dfr.valid_count(),
        dropped_targets: prep.targets.dropped,
        accumulated_pixels: prep.acc.valid_count(),
        interpolated_pixels: prep.int.valid_count(),
        rcanet: rca_curve.as_ref().map(TrainingSummary::from),
        msgnet: msg_curve.as_ref().map(TrainingSummary::from),
        prediction: buckets(&pred, &scene.lidar_sparse, &cfg.ranges, exec)?,
        mono_baseline: buckets(&scene.mono, &scene.lidar_sparse, &cfg.ranges, exec)?,
    };
    lap("evaluate", &mut timings);
    io::write_json("report", &report, &out.join("report.json"))?;
    // wall times vary run to run; kept apart so the report stays reproducible
    let timings: serde_json::Map<String, serde_json::Value> =
        timings.into_iter().map(|(k, v)| (k, serde_json::Value::from(v))).collect();
    io::write_json("report", &timings, &out.join("timings.json"))?;
    Ok(report)
}
