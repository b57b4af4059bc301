//! File helpers shared by the subcommands.
//!
//! Confidence maps are stored as two RDM files: the probabilities in the
//! named file and the validity mask as a 0/1 map next to it
//! (`c.rdm` -> `c.mask.rdm`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use sarcd_core::depth::{read_rdm, write_rdm};
use sarcd_core::{ConfidenceMap, DepthMap, ValidMask};

use crate::failure::{CliResult, Failure, Stage};

pub fn read_map(stage: &'static str, path: &Path) -> CliResult<DepthMap> {
    read_rdm(path).map_err(|e| Failure::data(stage, format!("{}: {e}", path.display())))
}

pub fn write_map(stage: &'static str, map: &DepthMap, path: &Path) -> CliResult<()> {
    ensure_parent(stage, path)?;
    write_rdm(map, path).map_err(|e| Failure::data(stage, format!("{}: {e}", path.display())))
}

pub fn mask_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.mask.rdm"))
}

pub fn write_confidence(stage: &'static str, conf: &ConfidenceMap, path: &Path) -> CliResult<()> {
    write_map(stage, &conf.to_depth_map(), path)?;
    write_map(stage, &conf.validity().to_depth_map(), &mask_path(path))
}

/// Load a confidence map. Without a mask file every pixel counts as valid.
pub fn read_confidence(stage: &'static str, path: &Path) -> CliResult<ConfidenceMap> {
    let values = read_map(stage, path)?;
    let mp = mask_path(path);
    let valid = if mp.exists() {
        read_map(stage, &mp)?.valid_pixels()
    } else {
        ValidMask::from_bits(values.width(), values.height(), vec![true; values.len()]).stage(stage)?
    };
    ConfidenceMap::from_depth_map(&values, valid).stage_as(stage, crate::failure::Kind::Data)
}

pub fn write_json<T: Serialize>(stage: &'static str, value: &T, path: &Path) -> CliResult<()> {
    ensure_parent(stage, path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(stage, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::data(stage, format!("{}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(stage: &'static str, path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(stage, format!("{}: {e}", path.display())))
}

pub fn ensure_parent(stage: &'static str, path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).stage(stage),
        _ => Ok(()),
    }
}

pub fn write_loss_csv(stage: &'static str, losses: &[f64], path: &Path) -> CliResult<()> {
    ensure_parent(stage, path)?;
    let err = |e: csv::Error| Failure::data(stage, format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["step", "loss"]).map_err(err)?;
    for (k, l) in losses.iter().enumerate() {
        w.write_record([k.to_string(), format!("{l:.9e}")]).map_err(err)?;
    }
    w.flush().stage(stage)
}

pub fn read_loss_csv(stage: &'static str, path: &Path) -> CliResult<Vec<f64>> {
    let err = |e: String| Failure::data(stage, format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let v: f64 = rec.get(1).ok_or_else(|| err("missing loss column".into()))?.trim().parse().map_err(|e| err(format!("{e}")))?;
        out.push(v);
    }
    Ok(out)
}
