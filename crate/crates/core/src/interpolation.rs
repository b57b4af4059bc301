//! Densification of sparse LiDAR depth by Delaunay triangulation and
//! barycentric interpolation.
//!
//! Valid pixels become vertices at `(col, row)`; every pixel inside the
//! convex hull takes the linear interpolant of its triangle. Pixels on a
//! shared edge belong to the lowest-indexed triangle.

use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation as _};

use crate::depth::{DepthMap, MapKind};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vertex {
    pub row: usize,
    pub col: usize,
    pub depth: f32,
}

impl HasPosition for Vertex {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        Point2::new(self.col as f64, self.row as f64)
    }
}

#[derive(Debug, Clone)]
pub struct Triangulation {
    pub vertices: Vec<Vertex>,
    /// Counter-clockwise in `(col, row)` coordinates.
    pub triangles: Vec<[usize; 3]>,
}

/// Twice the signed area of `(a, b, c)` in `(col, row)` coordinates. Exact
/// for pixel coordinates below 2^26.
#[inline]
fn orient(a: &Vertex, b: &Vertex, c: &Vertex) -> f64 {
    let (ax, ay) = (a.col as f64, a.row as f64);
    let (bx, by) = (b.col as f64, b.row as f64);
    let (cx, cy) = (c.col as f64, c.row as f64);
    (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
}

/// Triangulate the valid pixels of `sparse`, inserted in row-major order.
pub fn triangulate(sparse: &DepthMap) -> Result<Triangulation> {
    let nodes: Vec<Vertex> = sparse.valid_iter().map(|(row, col, depth)| Vertex { row, col, depth }).collect();
    if nodes.len() < 3 {
        return Err(Error::InsufficientSupport(format!("{} valid pixels, need at least 3", nodes.len())));
    }
    let mut dt: DelaunayTriangulation<Vertex> = DelaunayTriangulation::new();
    for v in &nodes {
        dt.insert(*v).map_err(|e| Error::InsufficientSupport(format!("{e:?}")))?;
    }
    let vertices: Vec<Vertex> = dt.vertices().map(|v| *v.data()).collect();
    let mut triangles: Vec<[usize; 3]> = dt
        .inner_faces()
        .map(|f| f.vertices().map(|v| v.fix().index()))
        .filter(|t| orient(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]) != 0.0)
        .collect();
    if triangles.is_empty() {
        return Err(Error::InsufficientSupport("all valid pixels are collinear".into()));
    }
    for t in &mut triangles {
        if orient(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]) < 0.0 {
            t.swap(1, 2);
        }
    }
    Ok(Triangulation { vertices, triangles })
}

/// Pixels covered by one triangle with their interpolated depth.
fn rasterize(tri: &Triangulation, t: &[usize; 3], width: usize) -> Vec<(usize, f32)> {
    let [a, b, c] = t.map(|i| tri.vertices[i]);
    let area = orient(&a, &b, &c);
    let r0 = a.row.min(b.row).min(c.row);
    let r1 = a.row.max(b.row).max(c.row);
    let c0 = a.col.min(b.col).min(c.col);
    let c1 = a.col.max(b.col).max(c.col);
    let lo = a.depth.min(b.depth).min(c.depth);
    let hi = a.depth.max(b.depth).max(c.depth);
    let mut out = Vec::new();
    for row in r0..=r1 {
        for col in c0..=c1 {
            let p = Vertex { row, col, depth: 0.0 };
            let wa = orient(&b, &c, &p);
            let wb = orient(&c, &a, &p);
            let wc = orient(&a, &b, &p);
            if wa < 0.0 || wb < 0.0 || wc < 0.0 {
                continue;
            }
            let z = (wa * f64::from(a.depth) + wb * f64::from(b.depth) + wc * f64::from(c.depth)) / area;
            out.push((row * width + col, (z as f32).clamp(lo, hi)));
        }
    }
    out
}

pub fn scaffold_interpolate(sparse: &DepthMap) -> Result<DepthMap> {
    scaffold_interpolate_with(sparse, Execution::default())
}

/// Interpolate after passing the sparse map through `prefilter`, e.g. an
/// outlier rejection step.
pub fn scaffold_interpolate_filtered(
    sparse: &DepthMap,
    prefilter: impl FnOnce(&DepthMap) -> DepthMap,
) -> Result<DepthMap> {
    let filtered = prefilter(sparse);
    sparse.ensure_same_dims("sparse", &filtered, "prefiltered")?;
    scaffold_interpolate(&filtered)
}

pub fn scaffold_interpolate_with(sparse: &DepthMap, exec: Execution) -> Result<DepthMap> {
    let tri = triangulate(sparse)?;
    let width = sparse.width();
    let covered = par::map_collect(exec, &tri.triangles, |t| rasterize(&tri, t, width));

    let mut values = vec![0.0f32; sparse.len()];
    let mut owned = vec![false; sparse.len()];
    // lowest triangle index claims shared edge pixels
    for pixels in covered {
        for (idx, z) in pixels {
            if !owned[idx] {
                owned[idx] = true;
                values[idx] = z;
            }
        }
    }
    for (row, col, depth) in sparse.valid_iter() {
        values[row * width + col] = depth;
    }
    DepthMap::new(width, sparse.height(), values, MapKind::Sparse)
}
