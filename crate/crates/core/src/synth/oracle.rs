//! Brute-force reference implementations.
//!
//! Everything here is written as plainly as possible, shares no helpers with
//! the main code paths and works in `f64` scalar loops. Tests compare the
//! optimized implementations against these.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::depth::{DepthMap, MapKind, ValidMask};
use crate::dilation::{Connectivity, EnhancementParams, RoiLabelMap};
use crate::error::{Error, Result};

/// Seeded region growing by breadth-first search, one seed at a time, then
/// an explicit per-pixel merge over all claims.
pub fn oracle_dilate(radar: &DepthMap, mono: &DepthMap, params: &EnhancementParams) -> Result<(DepthMap, RoiLabelMap)> {
    if radar.dims() != mono.dims() {
        return Err(Error::ShapeMismatch {
            left: "radar",
            lw: radar.width(),
            lh: radar.height(),
            right: "mono",
            rw: mono.width(),
            rh: mono.height(),
        });
    }
    params.validate()?;
    let (w, h) = radar.dims();
    let steps: Vec<(i64, i64)> = match params.connectivity {
        Connectivity::Four => vec![(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => {
            let mut v = Vec::new();
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if (dr, dc) != (0, 0) {
                        v.push((dr, dc));
                    }
                }
            }
            v
        }
    };
    let radius = params.max_radius as i64;

    // pixel -> list of (seed row, seed col, seed mono, radar depth)
    let mut claims: HashMap<(i64, i64), Vec<(i64, i64, f64, f64)>> = HashMap::new();
    for r in 0..h {
        for c in 0..w {
            let d = radar.get(r, c);
            let m0 = f64::from(mono.get(r, c));
            if d <= 0.0 || m0 <= 0.0 {
                continue;
            }
            let (sr, sc) = (r as i64, c as i64);
            let mut seen = HashSet::new();
            let mut queue = VecDeque::new();
            seen.insert((sr, sc));
            queue.push_back((sr, sc));
            while let Some((pr, pc)) = queue.pop_front() {
                claims.entry((pr, pc)).or_default().push((sr, sc, m0, f64::from(d)));
                for (dr, dc) in &steps {
                    let (nr, nc) = (pr + dr, pc + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    if (nr - sr).abs() > radius || (nc - sc).abs() > radius {
                        continue;
                    }
                    if seen.contains(&(nr, nc)) {
                        continue;
                    }
                    let m = f64::from(mono.get(nr as usize, nc as usize));
                    if m > 0.0 && (m - m0).abs() < params.tau1 {
                        seen.insert((nr, nc));
                        queue.push_back((nr, nc));
                    }
                }
            }
        }
    }

    let mut out = DepthMap::zeros(w, h, MapKind::Sparse);
    let mut mask = ValidMask::empty(w, h);
    for ((pr, pc), list) in claims {
        let pm = f64::from(mono.get(pr as usize, pc as usize));
        let mut best = list[0];
        for cand in &list[1..] {
            let (db, dc) = ((pm - best.2).abs(), (pm - cand.2).abs());
            let better = dc < db
                || (dc == db && cand.3 < best.3)
                || (dc == db && cand.3 == best.3 && (cand.0, cand.1) < (best.0, best.1));
            if better {
                best = *cand;
            }
        }
        out.set(pr as usize, pc as usize, best.3 as f32);
        mask.set(pr as usize, pc as usize, true);
    }
    Ok((out, RoiLabelMap::from_mask(mask)))
}

/// Per-pixel confidence targets: `(values, validity)`.
pub fn oracle_confidence(ddr: &DepthMap, dint: &DepthMap, roi: &ValidMask, tau2: f64) -> (Vec<f64>, Vec<bool>) {
    let n = ddr.len();
    let mut values = vec![0.0; n];
    let mut valid = vec![false; n];
    for i in 0..n {
        if !roi.get_index(i) {
            continue;
        }
        let t = f64::from(dint.values()[i]);
        if t > 0.0 {
            valid[i] = true;
            let d = f64::from(ddr.values()[i]);
            values[i] = if (t - d).abs() <= tau2 { 1.0 } else { 0.0 };
        }
    }
    (values, valid)
}

/// Mean BCE over masked pixels with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn oracle_bce(pred: &[f32], gt: &[f32], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let mut p = f64::from(pred[i]);
        if p < 1e-7 {
            p = 1e-7;
        }
        if p > 1.0 - 1e-7 {
            p = 1.0 - 1e-7;
        }
        let c = f64::from(gt[i]);
        total += -(c * p.ln() + (1.0 - c) * (1.0 - p).ln());
        n += 1;
    }
    total / n as f64
}

/// Two-term L1 depth loss; `None` when both target masks are empty.
pub fn oracle_depth_loss(dhat: &[f32], dacc: &[f32], dint: &[f32], lambda: f64) -> Option<f64> {
    let (mut sa, mut na, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..dhat.len() {
        let p = f64::from(dhat[i]);
        if dacc[i] > 0.0 {
            sa += (f64::from(dacc[i]) - p).abs();
            na += 1;
        }
        if dint[i] > 0.0 {
            si += (f64::from(dint[i]) - p).abs();
            ni += 1;
        }
    }
    if na == 0 && ni == 0 {
        return None;
    }
    let a = if na > 0 { sa / na as f64 } else { 0.0 };
    let b = if ni > 0 { si / ni as f64 } else { 0.0 };
    Some(a + lambda * b)
}

/// `(mae_mm, rmse_mm, n)` over pixels with `0 < gt <= max_range`.
pub fn oracle_metrics(pred: &[f32], gt: &[f32], max_range: f64) -> (f64, f64, usize) {
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for i in 0..gt.len() {
        let g = f64::from(gt[i]);
        if g > 0.0 && g <= max_range {
            let e = f64::from(pred[i]) - g;
            abs += e.abs();
            sq += e * e;
            n += 1;
        }
    }
    (abs / n as f64 * 1000.0, (sq / n as f64).sqrt() * 1000.0, n)
}

/// Central differences of a scalar function of a flat vector.
pub fn oracle_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    g
}
