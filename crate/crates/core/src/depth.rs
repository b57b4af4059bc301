//! Depth maps, validity masks and the on-disk formats they travel in.
//!
//! All grids are row-major with the origin at the top-left and are indexed
//! as `(row, col)`. A depth of exactly `0.0` marks an invalid pixel.
//!
//! The `RDM1` format is a 12 byte header (`b"RDM1"`, `u32` LE width, `u32` LE
//! height) followed by `width * height` little-endian `f32` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RDM_MAGIC: &[u8; 4] = b"RDM1";
pub const RDM_HEADER_LEN: usize = 12;
/// Upper bound on `width * height` accepted by the reader (2^31 pixels).
pub const RDM_MAX_PIXELS: u64 = 1 << 31;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"RDM1\"")]
    BadMagic([u8; 4]),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dimensions {width}x{height} overflow the supported pixel count")]
    DimensionOverflow { width: u32, height: u32 },
    #[error("png: {0}")]
    Png(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    kind: MapKind,
}

impl DepthMap {
    /// Build a map from a row-major grid, rejecting negative or non-finite
    /// values.
    pub fn new(width: usize, height: usize, values: Vec<f32>, kind: MapKind) -> Result<Self> {
        if width.checked_mul(height) != Some(values.len()) {
            return Err(Error::GridLength { width, height, len: values.len() });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidValue { index, value });
        }
        Ok(Self { width, height, values, kind })
    }

    pub fn zeros(width: usize, height: usize, kind: MapKind) -> Self {
        Self { width, height, values: vec![0.0; width * height], kind }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(value.is_finite() && value >= 0.0, "invalid fill depth {value}");
        Self { width, height, values: vec![value; width * height], kind: MapKind::Dense }
    }

    /// Build a map by evaluating `f(row, col)` at every pixel. Negative or
    /// non-finite results are stored as invalid.
    pub fn from_fn(
        width: usize,
        height: usize,
        kind: MapKind,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                let v = f(r, c);
                values.push(if v.is_finite() && v > 0.0 { v } else { 0.0 });
            }
        }
        Self { width, height, values, kind }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: MapKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Set a pixel. Negative or non-finite depths are stored as invalid.
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        let idx = self.index(row, col);
        self.values[idx] = if value.is_finite() && value > 0.0 { value } else { 0.0 };
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.get(row, col) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    /// Iterate over `(row, col, depth)` for every valid pixel in row-major order.
    pub fn valid_iter(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        let w = self.width;
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(move |(i, v)| (i / w, i % w, *v))
    }

    pub fn valid_pixels(&self) -> ValidMask {
        valid_pixels(self)
    }

    pub fn ensure_same_dims(&self, name: &'static str, other: &DepthMap, other_name: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(name, self.dims(), other_name, other.dims()));
        }
        Ok(())
    }

    /// Minimum and maximum over valid pixels.
    pub fn valid_range(&self) -> Option<(f32, f32)> {
        self.values.iter().filter(|v| **v > 0.0).fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}

/// Bit set over the pixels of a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl ValidMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width * height != bits.len() {
            return Err(Error::GridLength { width, height, len: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn get_index(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_subset_of(&self, other: &ValidMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    /// A 0/1 depth map view, used when a mask is written as RDM.
    pub fn to_depth_map(&self) -> DepthMap {
        let values = self.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        DepthMap { width: self.width, height: self.height, values, kind: MapKind::Sparse }
    }
}

/// Mask of pixels carrying a depth strictly greater than zero.
pub fn valid_pixels(map: &DepthMap) -> ValidMask {
    ValidMask {
        width: map.width,
        height: map.height,
        bits: map.values.iter().map(|v| *v > 0.0).collect(),
    }
}

/// Per-pixel association probability; meaningful only where `valid` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    valid: ValidMask,
}

impl ConfidenceMap {
    /// Values outside `valid` are forced to zero; valid values must lie in [0, 1].
    pub fn new(width: usize, height: usize, mut values: Vec<f32>, valid: ValidMask) -> Result<Self> {
        if width * height != values.len() {
            return Err(Error::GridLength { width, height, len: values.len() });
        }
        if valid.dims() != (width, height) {
            return Err(Error::shape("confidence", (width, height), "validity mask", valid.dims()));
        }
        for (i, v) in values.iter_mut().enumerate() {
            if !valid.get_index(i) {
                *v = 0.0;
            } else if !(0.0..=1.0).contains(v) {
                return Err(Error::InvalidValue { index: i, value: *v });
            }
        }
        Ok(Self { width, height, values, valid })
    }

    /// Constant confidence over `valid`.
    pub fn constant(valid: ValidMask, value: f32) -> Self {
        let values = valid.bits().iter().map(|b| if *b { value } else { 0.0 }).collect();
        Self { width: valid.width(), height: valid.height(), values, valid }
    }

    /// Interpret a stored map of probabilities with the given validity.
    pub fn from_depth_map(map: &DepthMap, valid: ValidMask) -> Result<Self> {
        Self::new(map.width(), map.height(), map.values().to_vec(), valid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn validity(&self) -> &ValidMask {
        &self.valid
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn to_depth_map(&self) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.values.clone(),
            kind: MapKind::Sparse,
        }
    }
}

/// Two-channel radar input: raw projected radar depth and filtered dilated depth.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedRadarDepth {
    raw: DepthMap,
    filtered: DepthMap,
}

impl EnhancedRadarDepth {
    pub fn new(raw: DepthMap, filtered: DepthMap) -> Result<Self> {
        raw.ensure_same_dims("raw radar", &filtered, "filtered radar")?;
        Ok(Self { raw, filtered })
    }

    pub fn raw(&self) -> &DepthMap {
        &self.raw
    }

    pub fn filtered(&self) -> &DepthMap {
        &self.filtered
    }

    pub fn dims(&self) -> (usize, usize) {
        self.raw.dims()
    }

    /// Channel 0 is the raw map, channel 1 the filtered map.
    pub fn channel(&self, index: usize) -> Option<&DepthMap> {
        match index {
            0 => Some(&self.raw),
            1 => Some(&self.filtered),
            _ => None,
        }
    }
}

/// RGB image with normalized intensities, stored channel-interleaved (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width * height * Self::CHANNELS != values.len() {
            return Err(Error::GridLength { width, height, len: values.len() / Self::CHANNELS });
        }
        if let Some((index, &value)) =
            values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidValue { index, value });
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    /// Write as an 8-bit RGB PNG.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        let bytes: Vec<u8> = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        writer.write_image_data(&bytes).map_err(png_err)?;
        Ok(())
    }

    /// Read an 8-bit RGB PNG.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let (info, buf) = decode_png(path.as_ref())?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(FormatError::Png(format!(
                "expected 8-bit RGB, found {:?} {:?}",
                info.color_type, info.bit_depth
            ))
            .into());
        }
        let values = buf.iter().map(|b| f32::from(*b) / 255.0).collect();
        Image::new(info.width as usize, info.height as usize, values)
    }
}

fn png_err(e: impl std::fmt::Display) -> Error {
    FormatError::Png(e.to_string()).into()
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Encode a map in the `RDM1` layout.
pub fn encode_rdm(map: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(RDM_HEADER_LEN + 4 * map.len());
    out.extend_from_slice(RDM_MAGIC);
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode an `RDM1` buffer. Maps with any zero pixel come back as sparse.
pub fn decode_rdm(bytes: &[u8]) -> Result<DepthMap> {
    if bytes.len() < RDM_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != RDM_MAGIC {
            return Err(FormatError::BadMagic(bytes[..4].try_into().unwrap()).into());
        }
        return Err(FormatError::Truncated {
            expected: RDM_HEADER_LEN as u64,
            found: bytes.len() as u64,
        }
        .into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != RDM_MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let pixels = u64::from(width) * u64::from(height);
    if pixels > RDM_MAX_PIXELS {
        return Err(FormatError::DimensionOverflow { width, height }.into());
    }
    let expected = RDM_HEADER_LEN as u64 + 4 * pixels;
    if bytes.len() as u64 != expected {
        return Err(FormatError::Truncated { expected, found: bytes.len() as u64 }.into());
    }
    let values: Vec<f32> = bytes[RDM_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let kind = if values.iter().all(|v| *v > 0.0) { MapKind::Dense } else { MapKind::Sparse };
    DepthMap::new(width as usize, height as usize, values, kind)
}

pub fn write_rdm(map: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_rdm(map))?;
    f.flush()?;
    Ok(())
}

pub fn read_rdm(path: impl AsRef<Path>) -> Result<DepthMap> {
    decode_rdm(&fs::read(path)?)
}

/// Import a 16-bit grayscale PNG whose pixel values are depths in millimetres.
pub fn read_depth_png(path: impl AsRef<Path>) -> Result<DepthMap> {
    let (info, buf) = decode_png(path.as_ref())?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(FormatError::Png(format!(
            "expected 16-bit grayscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        ))
        .into());
    }
    let values = buf
        .chunks_exact(2)
        .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / 1000.0)
        .collect();
    DepthMap::new(info.width as usize, info.height as usize, values, MapKind::Sparse)
}

/// Export as a 16-bit grayscale PNG in millimetres, saturating at 65.535 m.
pub fn write_depth_png(map: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(png_err)?;
    let mut bytes = Vec::with_capacity(map.len() * 2);
    for v in &map.values {
        let mm = (f64::from(*v) * 1000.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&mm.to_be_bytes());
    }
    writer.write_image_data(&bytes).map_err(png_err)?;
    Ok(())
}
