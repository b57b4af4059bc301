//! Depth accuracy against sparse ground truth, bucketed by maximum range.
//!
//! A pixel is scored when its ground truth is valid and no farther than the
//! bucket's range. Errors are accumulated in metres and reported in
//! millimetres. Predictions are not clamped.

use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::numeric::KahanSum;
use crate::par::{self, Execution};

/// The range buckets of the standard evaluation protocol, in metres.
pub const DEFAULT_RANGES: [f64; 3] = [50.0, 70.0, 80.0];

const CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub max_range: f64,
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub buckets: Vec<BucketMetrics>,
}

impl EvalReport {
    pub fn bucket(&self, max_range: f64) -> Option<&BucketMetrics> {
        self.buckets.iter().find(|b| b.max_range == max_range)
    }
}

pub fn evaluate(pred: &DepthMap, gt: &DepthMap, max_range: f64) -> Result<BucketMetrics> {
    evaluate_with(pred, gt, max_range, Execution::default())
}

pub fn evaluate_with(pred: &DepthMap, gt: &DepthMap, max_range: f64, exec: Execution) -> Result<BucketMetrics> {
    pred.ensure_same_dims("prediction", gt, "ground truth")?;
    if !(max_range > 0.0) {
        return Err(Error::InvalidParam(format!("max_range must be positive, got {max_range}")));
    }
    let p = pred.values();
    // fixed chunk boundaries keep the reduction order schedule-independent
    let partials = par::map_chunks(exec, gt.values(), CHUNK, |offset, chunk| {
        let (mut abs, mut sq, mut n) = (KahanSum::default(), KahanSum::default(), 0usize);
        for (i, &g) in chunk.iter().enumerate() {
            if g > 0.0 && f64::from(g) <= max_range {
                let e = f64::from(p[offset + i]) - f64::from(g);
                abs.add(e.abs());
                sq.add(e * e);
                n += 1;
            }
        }
        (abs, sq, n)
    });
    let (mut abs, mut sq, mut n) = (KahanSum::default(), KahanSum::default(), 0usize);
    for (a, s, c) in partials {
        abs.merge(a);
        sq.merge(s);
        n += c;
    }
    if n == 0 {
        return Err(Error::EmptySet("ground-truth pixels within range"));
    }
    let nf = n as f64;
    Ok(BucketMetrics {
        max_range,
        mae_mm: abs.total() / nf * 1000.0,
        rmse_mm: (sq.total() / nf).sqrt() * 1000.0,
        n_pixels: n,
    })
}

/// One bucket per entry of `ranges`. Buckets with no qualifying pixel are
/// an error.
pub fn evaluate_buckets(pred: &DepthMap, gt: &DepthMap, ranges: &[f64]) -> Result<EvalReport> {
    let buckets = ranges.iter().map(|&r| evaluate(pred, gt, r)).collect::<Result<_>>()?;
    Ok(EvalReport { buckets })
}
