//! Radar-camera association: confidence targets, the BCE association loss,
//! confidence filtering and assembly of the two-channel radar input.

use serde::{Deserialize, Serialize};

use crate::depth::{ConfidenceMap, DepthMap, EnhancedRadarDepth, MapKind, ValidMask};
use crate::dilation::{self, EnhancementParams, RoiLabelMap};
use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;

/// Probability clamp applied before taking logs in [`bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct ConfidenceTargets {
    pub confidence: ConfidenceMap,
    /// ROI pixels left out because the interpolated target was invalid there.
    pub dropped: usize,
}

/// Binary targets over the ROI: 1 where the dilated depth lies within
/// `tau2` (inclusive) of the interpolated LiDAR depth, 0 elsewhere in the
/// ROI. ROI pixels without interpolated depth are excluded from validity.
pub fn confidence_ground_truth(
    ddr: &DepthMap,
    dint: &DepthMap,
    roi: &RoiLabelMap,
    tau2: f64,
) -> Result<ConfidenceTargets> {
    ddr.ensure_same_dims("dilated depth", dint, "interpolated depth")?;
    if roi.dims() != ddr.dims() {
        return Err(Error::shape("dilated depth", ddr.dims(), "roi", roi.dims()));
    }
    let (w, h) = ddr.dims();
    let mut values = vec![0.0f32; w * h];
    let mut valid = vec![false; w * h];
    let mut dropped = 0;
    for (i, (&d, &t)) in ddr.values().iter().zip(dint.values()).enumerate() {
        if !roi.contains_index(i) {
            continue;
        }
        if t <= 0.0 {
            dropped += 1;
            continue;
        }
        valid[i] = true;
        if (f64::from(t) - f64::from(d)).abs() <= tau2 {
            values[i] = 1.0;
        }
    }
    Ok(ConfidenceTargets {
        confidence: ConfidenceMap::new(w, h, values, ValidMask::from_bits(w, h, valid)?)?,
        dropped,
    })
}

/// Mean binary cross-entropy between predicted and target confidence over
/// the ROI pixels that are valid in both maps.
///
/// Predictions are clamped to `[ε, 1 − ε]`. Both maps must carry the same
/// validity mask.
pub fn bce_loss(pred: &ConfidenceMap, gt: &ConfidenceMap, roi: &RoiLabelMap) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("prediction", pred.dims(), "target", gt.dims()));
    }
    if roi.dims() != gt.dims() {
        return Err(Error::shape("target", gt.dims(), "roi", roi.dims()));
    }
    if pred.validity() != gt.validity() {
        return Err(Error::MaskMismatch("prediction", "target"));
    }
    let terms: Vec<f64> = gt
        .validity()
        .indices()
        .filter(|&i| roi.contains_index(i))
        .map(|i| {
            let p = f64::from(pred.values()[i]).clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            let c = f64::from(gt.values()[i]);
            -(c * p.ln() + (1.0 - c) * (1.0 - p).ln())
        })
        .collect();
    if terms.is_empty() {
        return Err(Error::EmptySet("association region"));
    }
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

/// Keep dilated pixels whose confidence is valid and at least `tau3`.
pub fn filter_by_confidence(ddr: &DepthMap, conf: &ConfidenceMap, tau3: f64) -> Result<DepthMap> {
    if ddr.dims() != conf.dims() {
        return Err(Error::shape("dilated depth", ddr.dims(), "confidence", conf.dims()));
    }
    let values = ddr
        .values()
        .iter()
        .zip(conf.values())
        .enumerate()
        .map(|(i, (&d, &c))| {
            if d > 0.0 && conf.validity().get_index(i) && f64::from(c) >= tau3 {
                d
            } else {
                0.0
            }
        })
        .collect();
    DepthMap::new(ddr.width(), ddr.height(), values, MapKind::Sparse)
}

pub fn assemble_enhanced(dr: &DepthMap, dfr: &DepthMap) -> Result<EnhancedRadarDepth> {
    EnhancedRadarDepth::new(dr.clone(), dfr.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhancementSummary {
    pub radar_pixels: usize,
    pub dilated_pixels: usize,
    pub filtered_pixels: usize,
    pub dropped_targets: usize,
}

#[derive(Debug, Clone)]
pub struct Enhancement {
    pub dilation: dilation::Dilation,
    pub targets: ConfidenceTargets,
    pub filtered: DepthMap,
    pub enhanced: EnhancedRadarDepth,
    pub summary: EnhancementSummary,
}

/// Dilate, derive confidence from the interpolated LiDAR target, filter and
/// stack. This is the supervised-confidence path used to build training
/// data and to measure what perfect association would deliver.
pub fn enhance_with_target_confidence(
    radar: &DepthMap,
    mono: &DepthMap,
    dint: &DepthMap,
    params: &EnhancementParams,
) -> Result<Enhancement> {
    let dil = dilation::structure_aware_dilate(radar, mono, params)?;
    let targets = confidence_ground_truth(&dil.depth, dint, &dil.roi, params.tau2)?;
    let filtered = filter_by_confidence(&dil.depth, &targets.confidence, params.tau3)?;
    let enhanced = assemble_enhanced(radar, &filtered)?;
    let summary = EnhancementSummary {
        radar_pixels: radar.valid_count(),
        dilated_pixels: dil.depth.valid_count(),
        filtered_pixels: filtered.valid_count(),
        dropped_targets: targets.dropped,
    };
    Ok(Enhancement { dilation: dil, targets, filtered, enhanced, summary })
}
