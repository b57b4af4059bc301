//! Deterministic synthetic scenes.
//!
//! A scene is a camera looking down a street-like corridor: a flat ground
//! plane, a back wall and a few oriented boxes standing on the ground. All
//! maps are ray-cast through pixel centres, so the true depth is piecewise
//! smooth with steps at box silhouettes.
//!
//! Each kind of randomness draws from its own ChaCha stream, so changing
//! e.g. the radar noise level leaves the geometry and sample positions
//! untouched.

pub mod oracle;

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::{self, DepthMap, Image, MapKind, ValidMask};
use crate::error::{Error, Result};
use crate::interpolation;
use crate::projection::{self, Box3D, CameraModel, LidarSweep, Point, PointCloud, Pose};

const MAX_LIDAR_RANGE: f64 = 80.0;
const OUTLIER_RANGE: (f64, f64) = (1.0, 80.0);
const MIN_RADAR_DEPTH: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
enum Stream {
    Geometry = 0,
    Mono = 1,
    RadarPixels = 2,
    RadarNoise = 3,
    Outliers = 4,
    Dynamics = 5,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundPlane {
    /// Height of the camera above the ground, metres.
    pub camera_height: f64,
    /// Distance range for the back wall, metres.
    pub wall_min: f64,
    pub wall_max: f64,
}

impl Default for GroundPlane {
    fn default() -> Self {
        Self { camera_height: 1.6, wall_min: 60.0, wall_max: 75.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub boxes: usize,
    /// How many of the boxes move between LiDAR frames.
    pub dynamic_boxes: usize,
    pub ground: GroundPlane,
    pub radar_points: usize,
    /// Standard deviation of radar depth noise, metres.
    pub radar_sigma: f64,
    pub outlier_fraction: f64,
    /// Scanlines per LiDAR frame.
    pub lidar_scanlines: usize,
    /// Column spacing of LiDAR returns along a scanline.
    pub lidar_col_step: usize,
    pub lidar_frames: usize,
    /// Forward ego motion between consecutive LiDAR frames, metres.
    pub ego_step: f64,
    /// Distort the monocular map with a smooth monotone polynomial.
    pub mono_distortion: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            boxes: 3,
            dynamic_boxes: 1,
            ground: GroundPlane::default(),
            radar_points: 40,
            radar_sigma: 0.5,
            outlier_fraction: 0.2,
            lidar_scanlines: 16,
            lidar_col_step: 2,
            lidar_frames: 5,
            ego_step: 1.0,
            mono_distortion: true,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("scene size {}x{} is degenerate (minimum 8x8)", self.width, self.height));
        }
        if !(self.radar_sigma >= 0.0 && self.radar_sigma.is_finite()) {
            return bad(format!("radar_sigma must be finite and non-negative, got {}", self.radar_sigma));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad(format!("outlier_fraction must lie in [0, 1], got {}", self.outlier_fraction));
        }
        if self.dynamic_boxes > self.boxes {
            return bad(format!("{} dynamic boxes but only {} boxes", self.dynamic_boxes, self.boxes));
        }
        if self.lidar_frames == 0 || self.lidar_scanlines == 0 || self.lidar_col_step == 0 {
            return bad("LiDAR frames, scanlines and column step must be positive".into());
        }
        let g = &self.ground;
        if !(g.camera_height > 0.0 && g.wall_min > 1.0 && g.wall_max >= g.wall_min && g.wall_max < MAX_LIDAR_RANGE) {
            return bad(format!("invalid ground parameters {g:?}"));
        }
        if !(self.ego_step >= 0.0 && self.ego_step.is_finite()) {
            return bad(format!("ego_step must be finite and non-negative, got {}", self.ego_step));
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraModel {
        let f = 0.8 * self.width as f64;
        CameraModel {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Surface {
    Ground,
    Wall,
    Box(usize),
}

/// Static world plus moving boxes, in current-frame coordinates.
struct World {
    camera_height: f64,
    wall_z: f64,
    boxes: Vec<Box3D>,
    velocity: Vec<[f64; 3]>,
}

impl World {
    fn boxes_at(&self, frame_offset: f64) -> Vec<Box3D> {
        self.boxes
            .iter()
            .zip(&self.velocity)
            .map(|(b, v)| Box3D {
                center_x: b.center_x + v[0] * frame_offset,
                center_y: b.center_y + v[1] * frame_offset,
                center_z: b.center_z + v[2] * frame_offset,
                ..*b
            })
            .collect()
    }

    /// Nearest hit along `o + t d`, t > 0.
    fn cast(&self, boxes: &[Box3D], o: [f64; 3], d: [f64; 3]) -> Option<(f64, Surface)> {
        let mut best: Option<(f64, Surface)> = None;
        let mut consider = |t: f64, s: Surface| {
            if t > 1e-9 && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, s));
            }
        };
        if d[1] > 0.0 {
            consider((self.camera_height - o[1]) / d[1], Surface::Ground);
        }
        if d[2] > 0.0 {
            consider((self.wall_z - o[2]) / d[2], Surface::Wall);
        }
        for (i, b) in boxes.iter().enumerate() {
            if let Some(t) = ray_box(b, o, d) {
                consider(t, Surface::Box(i));
            }
        }
        best
    }
}

/// Entry distance of a ray into an oriented box (slab test in box frame).
fn ray_box(b: &Box3D, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    let lo = b.to_local(o);
    let c = b.center();
    let ld = b.to_local([c[0] + d[0], c[1] + d[1], c[2] + d[2]]);
    let h = b.half_extents();
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if ld[k].abs() < 1e-12 {
            if lo[k].abs() > h[k] {
                return None;
            }
            continue;
        }
        let a = (-h[k] - lo[k]) / ld[k];
        let z = (h[k] - lo[k]) / ld[k];
        t0 = t0.max(a.min(z));
        t1 = t1.min(a.max(z));
    }
    (t1 >= t0 && t0 > 1e-9).then_some(t0)
}

fn build_world(spec: &SceneSpec, cam: &CameraModel) -> Result<World> {
    let mut rng = stream(spec.seed, Stream::Geometry);
    let g = &spec.ground;
    let wall_z = rng.gen_range(g.wall_min..=g.wall_max);
    let mut boxes = Vec::with_capacity(spec.boxes);
    for _ in 0..spec.boxes {
        let z = rng.gen_range(8.0..35.0);
        let half_fov = 0.5 * z * cam.cx / cam.fx;
        let x = rng.gen_range(-half_fov..half_fov);
        let hx = rng.gen_range(0.8..2.0);
        let hy = rng.gen_range(0.7..1.5);
        let hz = rng.gen_range(0.8..2.5);
        let yaw = rng.gen_range(-0.6..0.6);
        boxes.push(Box3D::new([x, g.camera_height - hy, z], [hx, hy, hz], yaw)?);
    }
    let mut dyn_rng = stream(spec.seed, Stream::Dynamics);
    let velocity = (0..spec.boxes)
        .map(|i| {
            if i < spec.dynamic_boxes {
                let speed = dyn_rng.gen_range(1.0..3.0);
                let sign = if dyn_rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                [sign * speed, 0.0, dyn_rng.gen_range(-1.0..1.0)]
            } else {
                [0.0; 3]
            }
        })
        .collect();
    Ok(World { camera_height: g.camera_height, wall_z, boxes, velocity })
}

/// Smooth monotone distortion `a d + b d^2 + c` with positive slope on
/// `[0, 100]` metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonoDistortion {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl MonoDistortion {
    pub const IDENTITY: MonoDistortion = MonoDistortion { a: 1.0, b: 0.0, c: 0.0 };

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self { a: rng.gen_range(0.75..1.25), b: rng.gen_range(-0.0015..0.003), c: rng.gen_range(-0.5..1.5) }
    }

    pub fn apply(&self, d: f64) -> f64 {
        self.a * d + self.b * d * d + self.c
    }
}

#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub camera: CameraModel,
    pub truth: DepthMap,
    pub mono: DepthMap,
    pub distortion: MonoDistortion,
    pub radar: DepthMap,
    /// Radar pixels whose depth is an outlier rather than a noisy return.
    pub radar_outliers: ValidMask,
    /// Current-frame LiDAR projected into the camera.
    pub lidar_sparse: DepthMap,
    pub lidar_frames: Vec<LidarSweep>,
    /// Index of the current frame in `lidar_frames`.
    pub current_frame: usize,
    /// Boxes in current-frame coordinates.
    pub boxes: Vec<Box3D>,
    pub image: Image,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let cam = spec.camera();
    let world = build_world(spec, &cam)?;
    let (w, h) = (spec.width, spec.height);

    let mut truth = vec![0.0f32; w * h];
    let mut surface = vec![Surface::Wall; w * h];
    for r in 0..h {
        for c in 0..w {
            let (t, s) = world
                .cast(&world.boxes, [0.0; 3], cam.ray(r, c))
                .expect("every forward ray meets the back wall");
            truth[r * w + c] = t as f32;
            surface[r * w + c] = s;
        }
    }
    let truth = DepthMap::new(w, h, truth, MapKind::Dense)?;

    let distortion = if spec.mono_distortion {
        MonoDistortion::sample(&mut stream(spec.seed, Stream::Mono))
    } else {
        MonoDistortion::IDENTITY
    };
    let mono_vals = truth.values().iter().map(|&d| distortion.apply(f64::from(d)).max(0.05) as f32).collect();
    let mono = DepthMap::new(w, h, mono_vals, MapKind::Dense)?;

    let (radar, radar_outliers) = sample_radar(spec, &truth, &surface)?;
    let (lidar_frames, current_frame) = simulate_lidar(spec, &cam, &world)?;
    let lidar_sparse = projection::project_points(&lidar_frames[current_frame].cloud, &cam);
    let image = shade(spec, &truth, &surface)?;

    Ok(SceneBundle {
        spec: *spec,
        camera: cam,
        truth,
        mono,
        distortion,
        radar,
        radar_outliers,
        lidar_sparse,
        lidar_frames,
        current_frame,
        boxes: world.boxes.clone(),
        image,
    })
}

fn sample_radar(spec: &SceneSpec, truth: &DepthMap, surface: &[Surface]) -> Result<(DepthMap, ValidMask)> {
    let (w, h) = truth.dims();
    // radar returns come from objects and the road surface
    let candidates: Vec<usize> = (0..w * h).filter(|&i| surface[i] != Surface::Wall).collect();
    let n = spec.radar_points.min(candidates.len());
    let mut picked: Vec<usize> =
        index::sample(&mut stream(spec.seed, Stream::RadarPixels), candidates.len(), n).into_iter().map(|k| candidates[k]).collect();
    picked.sort_unstable();

    let n_out = (spec.outlier_fraction * n as f64).round() as usize;
    let mut orng = stream(spec.seed, Stream::Outliers);
    let mut is_outlier = vec![false; n];
    for k in index::sample(&mut orng, n, n_out) {
        is_outlier[k] = true;
    }
    let noise = Normal::new(0.0, spec.radar_sigma).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let mut nrng = stream(spec.seed, Stream::RadarNoise);

    let mut radar = DepthMap::zeros(w, h, MapKind::Sparse);
    let mut outliers = ValidMask::empty(w, h);
    for (k, &p) in picked.iter().enumerate() {
        let (r, c) = (p / w, p % w);
        let eps = noise.sample(&mut nrng);
        let d = if is_outlier[k] {
            outliers.set(r, c, true);
            orng.gen_range(OUTLIER_RANGE.0..=OUTLIER_RANGE.1)
        } else if spec.radar_sigma == 0.0 {
            f64::from(truth.get(r, c))
        } else {
            (f64::from(truth.get(r, c)) + eps).max(MIN_RADAR_DEPTH)
        };
        radar.set(r, c, d as f32);
    }
    Ok((radar, outliers))
}

fn simulate_lidar(spec: &SceneSpec, cam: &CameraModel, world: &World) -> Result<(Vec<LidarSweep>, usize)> {
    let frames = spec.lidar_frames;
    let current = frames - 1;
    let spacing = (spec.height as f64 / spec.lidar_scanlines as f64).max(1.0);
    let mut sweeps = Vec::with_capacity(frames);
    for k in 0..frames {
        let offset = k as f64 - current as f64;
        let origin = [0.0, 0.0, offset * spec.ego_step];
        let pose = Pose::from_yaw_translation(0.0, origin);
        let boxes_world = world.boxes_at(offset);
        // frames interleave their scanlines
        let shift = spacing * (current - k) as f64 / frames as f64;
        let mut points = Vec::new();
        for line in 0..spec.lidar_scanlines {
            let row = (line as f64 * spacing + shift).floor() as usize;
            if row >= spec.height {
                continue;
            }
            for col in (0..spec.width).step_by(spec.lidar_col_step) {
                let d = cam.ray(row, col);
                let Some((t, s)) = world.cast(&boxes_world, origin, d) else { continue };
                if t * d[2] > MAX_LIDAR_RANGE {
                    continue;
                }
                let dynamic = matches!(s, Surface::Box(i) if i < spec.dynamic_boxes);
                let mut p = Point::new((t * d[0]) as f32, (t * d[1]) as f32, (t * d[2]) as f32);
                p.dynamic = Some(dynamic);
                points.push(p);
            }
        }
        let inv = pose.inverse();
        let boxes = boxes_world[..spec.dynamic_boxes].iter().map(|b| b.transformed(&inv)).collect();
        sweeps.push(LidarSweep { cloud: PointCloud::new(points)?, pose, boxes });
    }
    Ok((sweeps, current))
}

fn shade(spec: &SceneSpec, truth: &DepthMap, surface: &[Surface]) -> Result<Image> {
    let (w, h) = (spec.width, spec.height);
    let mut values = Vec::with_capacity(w * h * 3);
    for (i, s) in surface.iter().enumerate() {
        let d = f64::from(truth.values()[i]);
        let base = match s {
            Surface::Ground => {
                let stripe = if ((d * 0.5) as i64) % 2 == 0 { 0.05 } else { 0.0 };
                [0.40 + stripe, 0.42 + stripe, 0.38 + stripe]
            }
            Surface::Wall => [0.55, 0.65, 0.85],
            Surface::Box(k) => {
                const PALETTE: [[f64; 3]; 4] = [[0.85, 0.3, 0.25], [0.25, 0.7, 0.35], [0.9, 0.75, 0.2], [0.6, 0.35, 0.8]];
                PALETTE[k % PALETTE.len()]
            }
        };
        let light = 0.35 + 0.65 * (-d / 40.0).exp();
        values.extend(base.iter().map(|b| (b * light).clamp(0.0, 1.0) as f32));
    }
    let _ = h;
    Image::new(w, h, values)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneManifest {
    spec: SceneSpec,
    camera: CameraModel,
    distortion: MonoDistortion,
    frames: usize,
    current_frame: usize,
}

impl SceneBundle {
    /// Multi-frame LiDAR accumulated into the current camera.
    pub fn accumulated_lidar(&self) -> Result<DepthMap> {
        projection::accumulate_lidar(&self.lidar_frames, self.current_frame, &Pose::IDENTITY, &self.camera)
    }

    /// Accumulated LiDAR densified by triangulation.
    pub fn interpolated_lidar(&self) -> Result<DepthMap> {
        interpolation::scaffold_interpolate(&self.accumulated_lidar()?)
    }

    /// Write every artifact into `dir` (created if missing).
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = SceneManifest {
            spec: self.spec,
            camera: self.camera,
            distortion: self.distortion,
            frames: self.lidar_frames.len(),
            current_frame: self.current_frame,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join("scene.json"), json)?;
        depth::write_rdm(&self.truth, dir.join("truth.rdm"))?;
        depth::write_rdm(&self.mono, dir.join("mono.rdm"))?;
        depth::write_rdm(&self.radar, dir.join("radar.rdm"))?;
        depth::write_rdm(&self.radar_outliers.to_depth_map(), dir.join("radar_outliers.rdm"))?;
        depth::write_rdm(&self.lidar_sparse, dir.join("lidar.rdm"))?;
        Box3D::write_csv(&self.boxes, dir.join("boxes.csv"))?;
        self.image.write_png(dir.join("image.png"))?;
        for (k, s) in self.lidar_frames.iter().enumerate() {
            s.cloud.write_csv(dir.join(format!("lidar_frame_{k}.csv")))?;
            s.pose.write(dir.join(format!("lidar_pose_{k}.txt")))?;
            Box3D::write_csv(&s.boxes, dir.join(format!("lidar_boxes_{k}.csv")))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("scene.json"))?;
        let m: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("scene.json: {e}")))?;
        let lidar_frames = (0..m.frames)
            .map(|k| {
                Ok(LidarSweep {
                    cloud: PointCloud::read_csv(dir.join(format!("lidar_frame_{k}.csv")))?,
                    pose: Pose::read(dir.join(format!("lidar_pose_{k}.txt")))?,
                    boxes: Box3D::read_csv(dir.join(format!("lidar_boxes_{k}.csv")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outliers = depth::read_rdm(dir.join("radar_outliers.rdm"))?;
        Ok(SceneBundle {
            spec: m.spec,
            camera: m.camera,
            truth: depth::read_rdm(dir.join("truth.rdm"))?,
            mono: depth::read_rdm(dir.join("mono.rdm"))?,
            distortion: m.distortion,
            radar: depth::read_rdm(dir.join("radar.rdm"))?.with_kind(MapKind::Sparse),
            radar_outliers: outliers.valid_pixels(),
            lidar_sparse: depth::read_rdm(dir.join("lidar.rdm"))?.with_kind(MapKind::Sparse),
            lidar_frames,
            current_frame: m.current_frame,
            boxes: Box3D::read_csv(dir.join("boxes.csv"))?,
            image: Image::read_png(dir.join("image.png"))?,
        })
    }
}
