//! Pinhole projection of point clouds into sparse depth maps and
//! multi-frame LiDAR accumulation with dynamic-object removal.
//!
//! Points are in camera coordinates: x right, y down, z forward, metres.
//! Box yaw is a rotation about the vertical (y) axis.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, MapKind};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParam(format!("focal lengths must be positive: {self:?}")));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidParam(format!("principal point outside image: {self:?}")));
        }
        Ok(())
    }

    /// Pixel `(row, col)` hit by a camera-frame point, if it lies in front of
    /// the camera and inside the image. Coordinates are truncated.
    #[inline]
    pub fn project(&self, p: [f64; 3]) -> Option<(usize, usize)> {
        let [x, y, z] = p;
        if !(z > 0.0) {
            return None;
        }
        let u = self.fx * x / z + self.cx;
        let v = self.fy * y / z + self.cy;
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((v as usize, u as usize))
        } else {
            None
        }
    }

    /// Unit-depth ray through the centre of pixel `(row, col)`.
    pub fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        [
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic: Option<bool>,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32) -> Self {
        Self { x, y, z, dynamic: None }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [f64::from(self.x), f64::from(self.y), f64::from(self.z)]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
            return Err(Error::InvalidParam(format!("non-finite point {p:?}")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let [x, y, z] = pose.apply(p.xyz());
                Point { x: x as f32, y: y as f32, z: z as f32, dynamic: p.dynamic }
            })
            .collect();
        PointCloud { points }
    }

    /// Read a CSV with header `x,y,z[,dynamic]`.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
        let mut points = Vec::new();
        for rec in rdr.deserialize() {
            let p: CsvPoint = rec.map_err(csv_err)?;
            points.push(Point { x: p.x, y: p.y, z: p.z, dynamic: p.dynamic.map(|d| d != 0) });
        }
        PointCloud::new(points)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let with_flag = self.points.iter().any(|p| p.dynamic.is_some());
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        if with_flag {
            w.write_record(["x", "y", "z", "dynamic"]).map_err(csv_err)?;
        } else {
            w.write_record(["x", "y", "z"]).map_err(csv_err)?;
        }
        for p in &self.points {
            let mut rec = vec![p.x.to_string(), p.y.to_string(), p.z.to_string()];
            if with_flag {
                rec.push(u8::from(p.dynamic.unwrap_or(false)).to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct CsvPoint {
    x: f32,
    y: f32,
    z: f32,
    #[serde(default)]
    dynamic: Option<u8>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Rigid transform taking frame-local points into a common frame:
/// `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    /// Rotation about the camera y axis followed by a translation.
    pub fn from_yaw_translation(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self { rotation: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], translation }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::InvalidParam("rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParam(format!("rotation determinant {det} != 1")));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParam("non-finite translation".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let rt = [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]];
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose { rotation: rt, translation: ti }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Pose { rotation: r, translation: self.apply(other.translation) }
    }

    /// Parse 12 whitespace-separated numbers, a row-major 3x4 `[R | t]`.
    pub fn parse(text: &str) -> Result<Self> {
        let nums: Vec<f64> = text
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("pose value {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if nums.len() != 12 {
            return Err(Error::Parse(format!("pose needs 12 numbers, found {}", nums.len())));
        }
        let row = |i: usize| [nums[4 * i], nums[4 * i + 1], nums[4 * i + 2]];
        Pose::new([row(0), row(1), row(2)], [nums[3], nums[7], nums[11]])
    }

    pub fn to_text(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        format!(
            "{} {} {} {}\n{} {} {} {}\n{} {} {} {}\n",
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2]
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Pose::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Oriented box: centre, positive half-extents, yaw about the y axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    #[serde(rename = "cx")]
    pub center_x: f64,
    #[serde(rename = "cy")]
    pub center_y: f64,
    #[serde(rename = "cz")]
    pub center_z: f64,
    pub hx: f64,
    pub hy: f64,
    pub hz: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], half_extents: [f64; 3], yaw: f64) -> Result<Self> {
        if half_extents.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::InvalidParam(format!("half-extents must be positive: {half_extents:?}")));
        }
        Ok(Self {
            center_x: center[0],
            center_y: center[1],
            center_z: center[2],
            hx: half_extents[0],
            hy: half_extents[1],
            hz: half_extents[2],
            yaw,
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.center_x, self.center_y, self.center_z]
    }

    pub fn half_extents(&self) -> [f64; 3] {
        [self.hx, self.hy, self.hz]
    }

    /// Point coordinates in the box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center_x, p[1] - self.center_y, p[2] - self.center_z];
        let (s, c) = self.yaw.sin_cos();
        // inverse of the yaw rotation used by Pose::from_yaw_translation
        [c * d[0] - s * d[2], d[1], s * d[0] + c * d[2]]
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= self.hx && l[1].abs() <= self.hy && l[2].abs() <= self.hz
    }

    /// The same box expressed in another frame.
    pub fn transformed(&self, pose: &Pose) -> Box3D {
        let c = pose.apply(self.center());
        // rotation about y contributes atan2 of its (0,2) entry
        let r = &pose.rotation;
        let dyaw = r[0][2].atan2(r[0][0]);
        Box3D { center_x: c[0], center_y: c[1], center_z: c[2], yaw: self.yaw + dyaw, ..*self }
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<Box3D>> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
        let mut out = Vec::new();
        for rec in rdr.deserialize() {
            let b: Box3D = rec.map_err(csv_err)?;
            out.push(Box3D::new(b.center(), b.half_extents(), b.yaw)?);
        }
        Ok(out)
    }

    pub fn write_csv(boxes: &[Box3D], path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        if boxes.is_empty() {
            w.write_record(["cx", "cy", "cz", "hx", "hy", "hz", "yaw"]).map_err(csv_err)?;
        }
        for b in boxes {
            w.serialize(b).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

const PROJECT_CHUNK: usize = 4096;

/// Z-buffer projection: each in-frustum point writes its depth, the nearest
/// point wins a pixel collision.
pub fn project_points(cloud: &PointCloud, cam: &CameraModel) -> DepthMap {
    project_points_with(cloud, cam, Execution::default())
}

pub fn project_points_with(cloud: &PointCloud, cam: &CameraModel, exec: Execution) -> DepthMap {
    let hits: Vec<Vec<(usize, f32)>> = par::map_chunks(exec, &cloud.points, PROJECT_CHUNK, |_, pts| {
        pts.iter()
            .filter_map(|p| {
                let (r, c) = cam.project(p.xyz())?;
                Some((r * cam.width + c, p.z))
            })
            .collect()
    });
    let mut values = vec![0.0f32; cam.width * cam.height];
    // min is order independent, so chunk order does not matter
    for (idx, z) in hits.into_iter().flatten() {
        let slot = &mut values[idx];
        if *slot == 0.0 || z < *slot {
            *slot = z;
        }
    }
    DepthMap::new(cam.width, cam.height, values, MapKind::Sparse).expect("projected depths are positive")
}

/// Points outside every box.
pub fn remove_dynamic(cloud: &PointCloud, boxes: &[Box3D]) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            let xyz = p.xyz();
            !boxes.iter().any(|b| b.contains(xyz))
        })
        .copied()
        .collect();
    PointCloud { points }
}

/// One LiDAR frame: its cloud in frame coordinates, the frame-to-world pose
/// and the dynamic-object boxes in frame coordinates.
#[derive(Debug, Clone)]
pub struct LidarSweep {
    pub cloud: PointCloud,
    pub pose: Pose,
    pub boxes: Vec<Box3D>,
}

/// Project adjacent frames into the camera at `target`.
///
/// Sweeps other than `current` lose the points inside their boxes before
/// being moved into the target frame; the current sweep is used whole.
pub fn accumulate_lidar(
    sweeps: &[LidarSweep],
    current: usize,
    target: &Pose,
    cam: &CameraModel,
) -> Result<DepthMap> {
    if sweeps.is_empty() {
        return Err(Error::InvalidParam("accumulation needs at least one frame".into()));
    }
    if current >= sweeps.len() {
        return Err(Error::InvalidParam(format!(
            "current frame {current} out of range for {} frames",
            sweeps.len()
        )));
    }
    target.validate()?;
    let to_target = target.inverse();
    let mut merged = PointCloud::default();
    for (k, sweep) in sweeps.iter().enumerate() {
        sweep.pose.validate()?;
        let to_cam = to_target.compose(&sweep.pose);
        let kept;
        let cloud = if k == current {
            &sweep.cloud
        } else {
            kept = remove_dynamic(&sweep.cloud, &sweep.boxes);
            &kept
        };
        merged.points.extend(cloud.transformed(&to_cam).points);
    }
    Ok(project_points(&merged, cam))
}
