//! Structure-aware dilation of sparse radar depth.
//!
//! Every radar pixel seeds a region on the monocular depth map: the
//! connected set of pixels, within a Chebyshev window of `max_radius`, whose
//! monocular depth differs from the seed's by strictly less than `tau1`.
//! The radar depth is copied across that region, and the union of all
//! regions forms the combined ROI.
//!
//! Overlapping regions are resolved per pixel, independent of seed order:
//! the claim with the smallest `|mono(pixel) - mono(seed)|` wins, then the
//! smaller radar depth, then the seed with the smaller `(row, col)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, MapKind, ValidMask};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::InvalidParam(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    pub fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        const EIGHT: [(isize, isize); 8] =
            [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// Thresholds shared by the enhancement stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhancementParams {
    /// ROI growth tolerance on monocular depth, metres.
    pub tau1: f64,
    /// Confidence target threshold, metres.
    pub tau2: f64,
    /// Confidence filter threshold.
    pub tau3: f64,
    /// Weight of the interpolated-target term in the depth loss.
    pub lambda: f64,
    /// Chebyshev cap on ROI growth, pixels.
    pub max_radius: usize,
    pub connectivity: Connectivity,
}

impl Default for EnhancementParams {
    fn default() -> Self {
        Self {
            tau1: 0.2,
            tau2: 0.4,
            tau3: 0.5,
            lambda: 2.0,
            max_radius: 64,
            connectivity: Connectivity::Four,
        }
    }
}

impl EnhancementParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(Error::InvalidParam(format!("tau1 and tau2 must be positive: {self:?}")));
        }
        if !(self.tau3 > 0.0 && self.tau3 < 1.0) {
            return Err(Error::InvalidParam(format!("tau3 must lie in (0, 1): {}", self.tau3)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParam(format!("lambda must be non-negative: {}", self.lambda)));
        }
        if self.max_radius < 1 {
            return Err(Error::InvalidParam("max_radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// A radar pixel that took part in dilation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub row: usize,
    pub col: usize,
    pub mono: f32,
    pub radar: f32,
}

const NO_SEED: u32 = u32::MAX;

/// Combined ROI plus, where known, the seed that won each member pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiLabelMap {
    members: ValidMask,
    seeds: Vec<Seed>,
    winner: Vec<u32>,
}

impl RoiLabelMap {
    /// ROI membership without winner records, e.g. loaded from a 0/1 map.
    pub fn from_mask(members: ValidMask) -> Self {
        let n = members.width() * members.height();
        Self { members, seeds: Vec::new(), winner: vec![NO_SEED; n] }
    }

    pub fn width(&self) -> usize {
        self.members.width()
    }

    pub fn height(&self) -> usize {
        self.members.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.members.dims()
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.members.get(row, col)
    }

    #[inline]
    pub fn contains_index(&self, idx: usize) -> bool {
        self.members.get_index(idx)
    }

    pub fn mask(&self) -> &ValidMask {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seeds that grew a region, sorted by `(row, col)`.
    pub fn seeds(&self) -> &[Seed] {
        &self.seeds
    }

    pub fn winner(&self, row: usize, col: usize) -> Option<&Seed> {
        match self.winner[row * self.width() + col] {
            NO_SEED => None,
            s => self.seeds.get(s as usize),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilationStats {
    pub seeds_grown: usize,
    pub seeds_skipped: usize,
    pub contested_pixels: usize,
    pub roi_pixels: usize,
    pub max_radius: usize,
}

#[derive(Debug, Clone)]
pub struct Dilation {
    pub depth: DepthMap,
    pub roi: RoiLabelMap,
    pub stats: DilationStats,
}

#[inline]
fn joins(mono: f32, seed_mono: f32, tau1: f64) -> bool {
    mono > 0.0 && (f64::from(mono) - f64::from(seed_mono)).abs() < tau1
}

/// Flood fill confined to the seed's Chebyshev window. Returns flat pixel
/// indices in discovery order.
fn grow_indices(
    mono: &DepthMap,
    row: usize,
    col: usize,
    tau1: f64,
    max_radius: usize,
    connectivity: Connectivity,
) -> Vec<u32> {
    let (w, h) = mono.dims();
    let seed_mono = mono.get(row, col);
    let r0 = row.saturating_sub(max_radius);
    let c0 = col.saturating_sub(max_radius);
    let r1 = (row + max_radius).min(h - 1);
    let c1 = (col + max_radius).min(w - 1);
    let ww = c1 - c0 + 1;
    let mut visited = vec![false; ww * (r1 - r0 + 1)];
    let values = mono.values();

    let mut out = Vec::new();
    let mut stack = vec![(row, col)];
    visited[(row - r0) * ww + (col - c0)] = true;
    while let Some((r, c)) = stack.pop() {
        out.push((r * w + c) as u32);
        for &(dr, dc) in connectivity.offsets() {
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if nr < r0 as isize || nc < c0 as isize || nr > r1 as isize || nc > c1 as isize {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            let slot = (nr - r0) * ww + (nc - c0);
            if visited[slot] {
                continue;
            }
            visited[slot] = true;
            if joins(values[nr * w + nc], seed_mono, tau1) {
                stack.push((nr, nc));
            }
        }
    }
    out
}

/// Grow the ROI of a single radar pixel on the monocular map.
///
/// Returns the member pixels sorted in row-major order. Fails when the seed
/// is outside the grid or has no valid monocular depth.
pub fn grow_roi(
    seed: (usize, usize),
    mono: &DepthMap,
    tau1: f64,
    max_radius: usize,
    connectivity: Connectivity,
) -> Result<Vec<(usize, usize)>> {
    let (row, col) = seed;
    if row >= mono.height() || col >= mono.width() {
        return Err(Error::OutOfBounds { row, col, width: mono.width(), height: mono.height() });
    }
    if !mono.is_valid(row, col) {
        return Err(Error::UnusableSeed { row, col });
    }
    let mut idx = grow_indices(mono, row, col, tau1, max_radius, connectivity);
    idx.sort_unstable();
    let w = mono.width();
    Ok(idx.into_iter().map(|i| (i as usize / w, i as usize % w)).collect())
}

/// Total order on competing claims for one pixel; smaller wins.
#[inline]
fn claim_order(pixel_mono: f32, a: &Seed, b: &Seed) -> Ordering {
    let da = (f64::from(pixel_mono) - f64::from(a.mono)).abs();
    let db = (f64::from(pixel_mono) - f64::from(b.mono)).abs();
    da.total_cmp(&db)
        .then(a.radar.total_cmp(&b.radar))
        .then((a.row, a.col).cmp(&(b.row, b.col)))
}

pub fn structure_aware_dilate(
    radar: &DepthMap,
    mono: &DepthMap,
    params: &EnhancementParams,
) -> Result<Dilation> {
    structure_aware_dilate_with(radar, mono, params, Execution::default())
}

/// Dilate every radar pixel and merge the regions.
///
/// Region growth fans out across seeds under [`Execution::Parallel`]; the
/// merge applies the per-pixel claim order, so the result is identical for
/// every schedule.
pub fn structure_aware_dilate_with(
    radar: &DepthMap,
    mono: &DepthMap,
    params: &EnhancementParams,
    exec: Execution,
) -> Result<Dilation> {
    radar.ensure_same_dims("radar", mono, "mono")?;
    params.validate()?;
    let (w, h) = radar.dims();

    let mut skipped = 0;
    let seeds: Vec<Seed> = radar
        .valid_iter()
        .filter_map(|(row, col, depth)| {
            let m = mono.get(row, col);
            if m > 0.0 {
                Some(Seed { row, col, mono: m, radar: depth })
            } else {
                skipped += 1;
                None
            }
        })
        .collect();

    let regions = par::map_collect(exec, &seeds, |s| {
        grow_indices(mono, s.row, s.col, params.tau1, params.max_radius, params.connectivity)
    });

    let mono_values = mono.values();
    let mut winner = vec![NO_SEED; w * h];
    let mut contested = vec![false; w * h];
    for (si, region) in regions.iter().enumerate() {
        let seed = &seeds[si];
        for &p in region {
            let p = p as usize;
            let slot = &mut winner[p];
            if *slot == NO_SEED {
                *slot = si as u32;
            } else {
                contested[p] = true;
                if claim_order(mono_values[p], seed, &seeds[*slot as usize]) == Ordering::Less {
                    *slot = si as u32;
                }
            }
        }
    }

    let mut values = vec![0.0f32; w * h];
    let mut members = vec![false; w * h];
    let mut roi_pixels = 0;
    for (p, &s) in winner.iter().enumerate() {
        if s != NO_SEED {
            values[p] = seeds[s as usize].radar;
            members[p] = true;
            roi_pixels += 1;
        }
    }

    let stats = DilationStats {
        seeds_grown: seeds.len(),
        seeds_skipped: skipped,
        contested_pixels: contested.iter().filter(|c| **c).count(),
        roi_pixels,
        max_radius: params.max_radius,
    };
    Ok(Dilation {
        depth: DepthMap::new(w, h, values, MapKind::Sparse)?,
        roi: RoiLabelMap { members: ValidMask::from_bits(w, h, members)?, seeds, winner },
        stats,
    })
}

/// Least-squares affine map `a * mono + b` fitted to the radar depths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub scale: f64,
    pub shift: f64,
    pub samples: usize,
}

/// Optional pre-alignment of the monocular map to radar scale.
///
/// Invalid monocular pixels stay invalid; aligned values that would fall to
/// or below zero become invalid as well.
pub fn align_mono_affine(mono: &DepthMap, radar: &DepthMap) -> Result<(DepthMap, AffineFit)> {
    radar.ensure_same_dims("radar", mono, "mono")?;
    let pairs: Vec<(f64, f64)> = radar
        .valid_iter()
        .filter(|&(r, c, _)| mono.is_valid(r, c))
        .map(|(r, c, d)| (f64::from(mono.get(r, c)), f64::from(d)))
        .collect();
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return Err(Error::InsufficientSupport(format!("affine alignment needs 2 radar pixels, got {}", pairs.len())));
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= f64::EPSILON {
        return Err(Error::InsufficientSupport("radar pixels share one monocular depth".into()));
    }
    let scale = sxy / sxx;
    let shift = my - scale * mx;
    let aligned = DepthMap::from_fn(mono.width(), mono.height(), mono.kind(), |r, c| {
        let m = mono.get(r, c);
        if m > 0.0 {
            (scale * f64::from(m) + shift) as f32
        } else {
            0.0
        }
    });
    Ok((aligned, AffineFit { scale, shift, samples: pairs.len() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::oracle::oracle_dilate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(tau1: f64, radius: usize, conn: Connectivity) -> EnhancementParams {
        EnhancementParams { tau1, max_radius: radius, connectivity: conn, ..Default::default() }
    }

    /// Smooth field with a few depth steps.
    fn random_mono(rng: &mut ChaCha8Rng, w: usize, h: usize) -> DepthMap {
        let a = rng.gen_range(-0.05..0.05);
        let b = rng.gen_range(-0.05..0.05);
        let base = rng.gen_range(5.0..30.0);
        let split = rng.gen_range(0..w);
        let step = rng.gen_range(0.0..3.0);
        DepthMap::from_fn(w, h, MapKind::Dense, |r, c| {
            let s = if c >= split { step } else { 0.0 };
            (base + a * r as f64 + b * c as f64 + 0.3 * ((r as f64) * 0.4).sin() + s) as f32
        })
    }

    fn random_radar(rng: &mut ChaCha8Rng, w: usize, h: usize, n: usize) -> DepthMap {
        let mut m = DepthMap::zeros(w, h, MapKind::Sparse);
        for _ in 0..n {
            m.set(rng.gen_range(0..h), rng.gen_range(0..w), rng.gen_range(1.0..60.0));
        }
        m
    }

    #[test]
    fn uniform_map_fills_window() {
        let mono = DepthMap::filled(9, 9, 10.0);
        let roi = grow_roi((4, 4), &mono, 0.2, 2, Connectivity::Four).unwrap();
        assert_eq!(roi.len(), 25);
        assert!(roi.iter().all(|&(r, c)| (2..=6).contains(&r) && (2..=6).contains(&c)));
    }

    #[test]
    fn depth_edge_blocks_growth() {
        let mono = DepthMap::from_fn(10, 6, MapKind::Dense, |_, c| if c < 5 { 10.0 } else { 11.0 });
        let roi = grow_roi((3, 2), &mono, 0.2, 3, Connectivity::Four).unwrap();
        let expected: Vec<(usize, usize)> =
            (0..6).flat_map(|r| (0..5).map(move |c| (r, c))).collect();
        assert_eq!(roi, expected);
    }

    #[test]
    fn seed_errors() {
        let mut mono = DepthMap::filled(4, 4, 10.0);
        mono.set(1, 1, 0.0);
        assert!(matches!(
            grow_roi((1, 1), &mono, 0.2, 2, Connectivity::Four),
            Err(Error::UnusableSeed { row: 1, col: 1 })
        ));
        assert!(matches!(
            grow_roi((9, 1), &mono, 0.2, 2, Connectivity::Four),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn invalid_mono_never_joins() {
        let mut mono = DepthMap::filled(5, 1, 10.0);
        mono.set(0, 2, 0.0);
        let roi = grow_roi((0, 0), &mono, 0.2, 4, Connectivity::Eight).unwrap();
        assert_eq!(roi, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn empty_radar_gives_empty_roi() {
        let radar = DepthMap::zeros(8, 8, MapKind::Sparse);
        let mono = DepthMap::filled(8, 8, 10.0);
        let out = structure_aware_dilate(&radar, &mono, &EnhancementParams::default()).unwrap();
        assert_eq!(out.depth.valid_count(), 0);
        assert!(out.roi.is_empty());
        assert_eq!(out.stats.seeds_grown, 0);
    }

    #[test]
    fn single_seed_fills_radius_one_window() {
        // the window is Chebyshev, so 4-connected growth still reaches the corners
        let mut radar = DepthMap::zeros(7, 7, MapKind::Sparse);
        radar.set(3, 3, 12.5);
        let mono = DepthMap::filled(7, 7, 10.0);
        let out = structure_aware_dilate(&radar, &mono, &params(0.2, 1, Connectivity::Four)).unwrap();
        let valid: Vec<(usize, usize, f32)> = out.depth.valid_iter().collect();
        let expected: Vec<(usize, usize, f32)> = (2..5).flat_map(|r| (2..5).map(move |c| (r, c, 12.5))).collect();
        assert_eq!(valid, expected);
        assert_eq!(out.roi.len(), 9);
        assert_eq!(out.roi.winner(2, 3).unwrap().radar, 12.5);
    }

    #[test]
    fn overlapping_claims_follow_merge_rule() {
        // seeds at columns 2 (mono 9, radar 10) and 6 (mono 29, radar 30) on a
        // 1x9 strip; tau1 large enough that both reach every pixel.
        let mono_row = [9.0f32, 9.0, 9.0, 14.0, 19.0, 24.0, 29.0, 29.0, 29.0];
        let mono = DepthMap::new(9, 1, mono_row.to_vec(), MapKind::Dense).unwrap();
        let mut radar = DepthMap::zeros(9, 1, MapKind::Sparse);
        radar.set(0, 2, 10.0);
        radar.set(0, 6, 30.0);
        let out = structure_aware_dilate(&radar, &mono, &params(25.0, 8, Connectivity::Four)).unwrap();
        // by hand: |m-9| vs |m-29| per pixel; 19 is a tie -> 10 m wins
        let expected = [10.0f32, 10.0, 10.0, 10.0, 10.0, 30.0, 30.0, 30.0, 30.0];
        assert_eq!(out.depth.values(), &expected);
        assert_eq!(out.stats.contested_pixels, 9);
    }

    #[test]
    fn seed_with_invalid_mono_is_skipped() {
        let mut mono = DepthMap::filled(5, 5, 10.0);
        mono.set(0, 0, 0.0);
        let mut radar = DepthMap::zeros(5, 5, MapKind::Sparse);
        radar.set(0, 0, 5.0);
        radar.set(4, 4, 7.0);
        let out = structure_aware_dilate(&radar, &mono, &EnhancementParams::default()).unwrap();
        assert_eq!(out.stats.seeds_skipped, 1);
        assert_eq!(out.stats.seeds_grown, 1);
        assert!(!out.roi.contains(0, 0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let radar = DepthMap::zeros(4, 4, MapKind::Sparse);
        let mono = DepthMap::filled(5, 4, 1.0);
        assert!(matches!(
            structure_aware_dilate(&radar, &mono, &EnhancementParams::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn grow_roi_matches_bfs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mono = random_mono(&mut rng, 40, 30);
            let seed = (rng.gen_range(0..30), rng.gen_range(0..40));
            let got = grow_roi(seed, &mono, 0.2, 8, Connectivity::Four).unwrap();
            let mut radar = DepthMap::zeros(40, 30, MapKind::Sparse);
            radar.set(seed.0, seed.1, 1.0);
            let (_, oracle_roi) = oracle_dilate(&radar, &mono, &params(0.2, 8, Connectivity::Four)).unwrap();
            let expected: Vec<(usize, usize)> = oracle_roi.mask().indices().map(|i| (i / 40, i % 40)).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn affine_alignment_recovers_linear_scale() {
        let truth = DepthMap::from_fn(16, 16, MapKind::Dense, |r, c| 5.0 + r as f32 + 0.5 * c as f32);
        let mono = DepthMap::from_fn(16, 16, MapKind::Dense, |r, c| (truth.get(r, c) - 1.0) / 2.0);
        let mut radar = DepthMap::zeros(16, 16, MapKind::Sparse);
        for (r, c) in [(1, 1), (5, 9), (12, 3), (14, 14)] {
            radar.set(r, c, truth.get(r, c));
        }
        let (aligned, fit) = align_mono_affine(&mono, &radar).unwrap();
        assert!((fit.scale - 2.0).abs() < 1e-9 && (fit.shift - 1.0).abs() < 1e-9);
        assert!((aligned.get(7, 7) - truth.get(7, 7)).abs() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn dilation_invents_no_depths_and_is_schedule_free(seed in any::<u64>(), eight in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mono = random_mono(&mut rng, 32, 24);
            let radar = random_radar(&mut rng, 32, 24, 12);
            let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
            let p = params(0.2, 10, conn);
            let par_out = structure_aware_dilate_with(&radar, &mono, &p, Execution::Parallel).unwrap();
            let seq_out = structure_aware_dilate_with(&radar, &mono, &p, Execution::Sequential).unwrap();
            prop_assert_eq!(&par_out.depth, &seq_out.depth);
            prop_assert_eq!(&par_out.roi, &seq_out.roi);

            let radar_values: Vec<f32> = radar.valid_iter().map(|(_, _, v)| v).collect();
            for (_, _, v) in par_out.depth.valid_iter() {
                prop_assert!(radar_values.contains(&v));
            }
            // every radar seed is in its own ROI and holds a contesting depth
            for s in par_out.roi.seeds() {
                prop_assert!(par_out.roi.contains(s.row, s.col));
                let won = par_out.roi.winner(s.row, s.col).unwrap();
                prop_assert!((f64::from(mono.get(s.row, s.col)) - f64::from(won.mono)).abs() < p.tau1);
            }
            // winner records agree with the tolerance test
            for (r, c, _) in par_out.depth.valid_iter() {
                let won = par_out.roi.winner(r, c).unwrap();
                prop_assert!((f64::from(mono.get(r, c)) - f64::from(won.mono)).abs() < p.tau1);
            }
        }

        #[test]
        fn roi_grows_with_tau1(seed in any::<u64>(), t in 0.01f64..1.0, dt in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mono = random_mono(&mut rng, 24, 24);
            let radar = random_radar(&mut rng, 24, 24, 6);
            let small = structure_aware_dilate(&radar, &mono, &params(t, 12, Connectivity::Four)).unwrap();
            let large = structure_aware_dilate(&radar, &mono, &params(t + dt, 12, Connectivity::Four)).unwrap();
            prop_assert!(small.roi.mask().is_subset_of(large.roi.mask()));
        }
    }
}
