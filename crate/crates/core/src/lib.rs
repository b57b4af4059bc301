//! Structure-aware radar-camera depth enhancement.
//!
//! The crate turns a sparse radar depth map into a denser, filtered radar
//! signal by growing a region of interest around every radar pixel on a
//! dense monocular depth map, extending the radar depth across that region
//! and discarding pixels whose association confidence is low. Around that
//! core it provides everything needed to exercise the method without real
//! sensor data:
//!
//! - [`depth`]: depth maps, validity masks and the `RDM1` binary format
//! - [`projection`]: pinhole projection and multi-frame LiDAR accumulation
//! - [`dilation`]: seeded ROI growth and the order-free merge of overlapping ROIs
//! - [`association`]: confidence targets, BCE loss and confidence filtering
//! - [`interpolation`]: Delaunay/barycentric densification of sparse LiDAR
//! - [`tensor`]: a small reverse-mode autodiff engine
//! - [`blocks`]: attention fusion blocks and toy encoder/decoder networks
//! - [`metrics`]: range-bucketed MAE/RMSE in millimetres
//! - [`synth`]: deterministic synthetic scenes and brute-force oracles
//!
//! Data-parallel loops go through [`par`]; with the `parallel` feature
//! disabled every path runs sequentially and produces identical output.

pub mod association;
pub mod blocks;
pub mod depth;
pub mod dilation;
mod error;
pub mod interpolation;
pub mod metrics;
pub mod numeric;
pub mod par;
pub mod projection;
pub mod synth;
pub mod tensor;

pub use depth::{ConfidenceMap, DepthMap, EnhancedRadarDepth, Image, MapKind, ValidMask};
pub use dilation::{Connectivity, EnhancementParams, RoiLabelMap};
pub use error::{Error, Result};
pub use par::Execution;
