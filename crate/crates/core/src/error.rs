use std::io;

use crate::depth::FormatError;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left} is {lw}x{lh}, {right} is {rw}x{rh}")]
    ShapeMismatch {
        left: &'static str,
        lw: usize,
        lh: usize,
        right: &'static str,
        rw: usize,
        rh: usize,
    },
    #[error("invalid depth value {value} at index {index}")]
    InvalidValue { index: usize, value: f32 },
    #[error("grid of {width}x{height} does not match {len} values")]
    GridLength { width: usize, height: usize, len: usize },
    #[error("radar pixel ({row}, {col}) has no valid monocular depth")]
    UnusableSeed { row: usize, col: usize },
    #[error("pixel ({row}, {col}) lies outside a {width}x{height} grid")]
    OutOfBounds { row: usize, col: usize, width: usize, height: usize },
    #[error("empty {0}: mean is undefined")]
    EmptySet(&'static str),
    #[error("insufficient support for triangulation: {0}")]
    InsufficientSupport(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("validity masks of {0} and {1} differ")]
    MaskMismatch(&'static str, &'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(
        left: &'static str,
        (lw, lh): (usize, usize),
        right: &'static str,
        (rw, rh): (usize, usize),
    ) -> Self {
        Error::ShapeMismatch { left, lw, lh, right, rw, rh }
    }
}
