//! Attention fusion blocks and the toy networks built from them.
//!
//! Weights live in a [`ParamStore`], a flat map from dotted names to
//! tensors. Layer descriptors ([`Conv`], [`Saeb`], [`Afb`]) know which
//! names and shapes they need; a forward pass binds the whole store onto a
//! [`Tape`] and looks parameters up by name.
//!
//! Two networks are provided:
//!
//! - [`ToyMsgNet`] predicts a depth residual from monocular depth and the
//!   two-channel radar input, with an SAEB at every encoder scale.
//! - [`ToyRcaNet`] predicts association confidence from the image and the
//!   dilated radar depth, fusing the two encoders with an AFB at the
//!   bottleneck.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::{ConfidenceMap, DepthMap, EnhancedRadarDepth, FormatError, Image, MapKind};
use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Depths are divided by this before entering a network and residuals are
/// multiplied by it on the way out.
pub const DEPTH_SCALE: f64 = 80.0;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RDW1";

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self { name, shape, fan_in, kind: ParamKind::Weight }
    }

    fn bias(name: String, len: usize) -> Self {
        Self { name, shape: vec![len], fan_in: 0, kind: ParamKind::Bias }
    }
}

/// Named parameter tensors in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for s in specs {
            let t = match s.kind {
                ParamKind::Weight => {
                    let bound = 1.0 / (s.fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| rng.gen_range(-bound..=bound))
                }
                ParamKind::Bias => Tensor::zeros(&s.shape),
            };
            params.insert(s.name.clone(), t);
        }
        Self { params }
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        Self { params: specs.iter().map(|s| (s.name.clone(), Tensor::zeros(&s.shape))).collect() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::InvalidParam(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::InvalidParam(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Check that every spec is present with the right shape.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::InvalidParam(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    /// Tagged binary: magic, entry count, then per entry the name, the
    /// dimensions and little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != WEIGHTS_MAGIC {
            return Err(FormatError::BadMagic([magic[0], magic[1], magic[2], magic[3]]).into());
        }
        let count = cur.u32()?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|e| Error::Parse(format!("parameter name: {e}")))?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Parse(format!("{} trailing bytes after weights", bytes.len() - cur.pos)));
        }
        Ok(Self { params })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated { expected: (self.pos as u64).saturating_add(n as u64), found: self.bytes.len() as u64 }.into());
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// A parameter store bound onto a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Record every parameter, as a leaf when `trainable`, else as a constant.
    pub fn new(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::InvalidParam(format!("missing parameter {name}")))
    }

    /// Gradients keyed like the store. Parameters without a gradient get zeros.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> ParamStore {
        let params = self
            .vars
            .iter()
            .map(|(name, v)| {
                let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
                (name.clone(), g)
            })
            .collect();
        ParamStore { params }
    }
}

// ---------------------------------------------------------------------------
// layers

/// Same-padded convolution with bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn params(&self, prefix: &str) -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight(format!("{prefix}.w"), vec![self.k, self.k, self.cin, self.cout], self.k * self.k * self.cin),
            ParamSpec::bias(format!("{prefix}.b"), self.cout),
        ]
    }

    pub fn forward(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = b.get(&format!("{prefix}.w"))?;
        let bias = b.get(&format!("{prefix}.b"))?;
        Ok(tape.conv2d(x, w, Some(bias))?)
    }
}

/// Configuration of the structure-aware enhancement block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaebConfig {
    /// Channel-attention MLP reduction ratio.
    pub reduction: usize,
    /// Spatial-attention kernel size (odd).
    pub spatial_kernel: usize,
}

impl Default for SaebConfig {
    fn default() -> Self {
        Self { reduction: 4, spatial_kernel: 7 }
    }
}

/// Structure-aware enhancement block: monocular features gate radar
/// features, channel attention first, then spatial attention, and a 1x1
/// convolution fuses the gated radar features with the monocular ones.
///
/// The channel MLP reads the concatenation of both streams (`c_m + c_r`
/// inputs) and emits one gate per radar channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Saeb {
    pub c_m: usize,
    pub c_r: usize,
    pub cfg: SaebConfig,
}

impl Saeb {
    fn hidden(&self) -> usize {
        ((self.c_m + self.c_r) / self.cfg.reduction.max(1)).max(1)
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamSpec> {
        let c_in = self.c_m + self.c_r;
        let hid = self.hidden();
        let k = self.cfg.spatial_kernel;
        let mut v = vec![
            ParamSpec::weight(format!("{prefix}.mlp1.w"), vec![c_in, hid], c_in),
            ParamSpec::bias(format!("{prefix}.mlp1.b"), hid),
            ParamSpec::weight(format!("{prefix}.mlp2.w"), vec![hid, self.c_r], hid),
            ParamSpec::bias(format!("{prefix}.mlp2.b"), self.c_r),
        ];
        v.extend(Conv { cin: 2, cout: 1, k }.params(&format!("{prefix}.spatial")));
        v.extend(Conv { cin: self.c_r + self.c_m, cout: self.c_r, k: 1 }.params(&format!("{prefix}.fuse")));
        v
    }

    fn mlp(tape: &mut Tape, b: &Bound, prefix: &str, pooled: Var) -> Result<Var> {
        let c = tape.shape(pooled)[2];
        let row = tape.reshape(pooled, &[1, c])?;
        let h = tape.matmul(row, b.get(&format!("{prefix}.mlp1.w"))?)?;
        let h = tape.add_bias(h, b.get(&format!("{prefix}.mlp1.b"))?)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, b.get(&format!("{prefix}.mlp2.w"))?)?;
        Ok(tape.add_bias(o, b.get(&format!("{prefix}.mlp2.b"))?)?)
    }

    /// `sigmoid(MLP(avgpool f) + MLP(maxpool f))`, shape `[1, 1, c_r]`.
    pub fn channel_attention(tape: &mut Tape, b: &Bound, prefix: &str, f: Var) -> Result<Var> {
        let avg = tape.global_avg_pool(f)?;
        let max = tape.global_max_pool(f)?;
        let a = Self::mlp(tape, b, prefix, avg)?;
        let m = Self::mlp(tape, b, prefix, max)?;
        let s = tape.add(a, m)?;
        let s = tape.sigmoid(s);
        let c = tape.shape(s)[1];
        Ok(tape.reshape(s, &[1, 1, c])?)
    }

    /// `sigmoid(conv([mean_c f; max_c f]))`, shape `[h, w, 1]`.
    pub fn spatial_attention(tape: &mut Tape, b: &Bound, prefix: &str, f: Var) -> Result<Var> {
        let mean = tape.channel_mean(f)?;
        let max = tape.channel_max(f)?;
        let both = tape.concat(mean, max)?;
        let s = Conv::forward(tape, b, &format!("{prefix}.spatial"), both)?;
        Ok(tape.sigmoid(s))
    }

    /// Enhanced radar features `[h, w, c_r]` from `f_m: [h, w, c_m]` and
    /// `f_r: [h, w, c_r]`.
    pub fn forward(tape: &mut Tape, b: &Bound, prefix: &str, f_m: Var, f_r: Var) -> Result<Var> {
        let joint = tape.concat(f_m, f_r)?;
        let mc = Self::channel_attention(tape, b, prefix, joint)?;
        let f_c = tape.broadcast_mul(f_r, mc)?;
        let ms = Self::spatial_attention(tape, b, prefix, f_c)?;
        let gated = tape.broadcast_mul(f_r, ms)?;
        let cat = tape.concat(gated, f_m)?;
        Conv::forward(tape, b, &format!("{prefix}.fuse"), cat)
    }
}

/// Attention fusion block configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfbConfig {
    /// Number of stacked self+cross attention modules.
    pub modules: usize,
    /// Token width of both streams.
    pub dim: usize,
    /// Query/key/value width of the single head.
    pub head_dim: usize,
}

impl AfbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modules == 0 || self.dim < 2 || self.head_dim == 0 {
            return Err(Error::InvalidParam(format!("invalid attention fusion config {self:?}")));
        }
        Ok(())
    }
}

/// Attention fusion block. Each module runs pre-norm self-attention on
/// both token streams, then cross-attention in both directions, each with a
/// residual add. Layer norms carry no affine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Afb {
    pub cfg: AfbConfig,
}

const ATTENTION_UNITS: [&str; 4] = ["self_i", "self_r", "cross_i", "cross_r"];

impl Afb {
    pub fn params(&self, prefix: &str) -> Vec<ParamSpec> {
        let (d, dh) = (self.cfg.dim, self.cfg.head_dim);
        let mut v = Vec::new();
        for m in 0..self.cfg.modules {
            for unit in ATTENTION_UNITS {
                let p = format!("{prefix}.m{m}.{unit}");
                for q in ["q", "k", "v"] {
                    v.push(ParamSpec::weight(format!("{p}.{q}"), vec![d, dh], d));
                }
                v.push(ParamSpec::weight(format!("{p}.o"), vec![dh, d], dh));
            }
        }
        v
    }

    /// Single-head `softmax(Q K^T / sqrt(d_h)) V W_o`.
    pub fn attention(tape: &mut Tape, b: &Bound, prefix: &str, queries: Var, context: Var) -> Result<Var> {
        let wq = b.get(&format!("{prefix}.q"))?;
        let wk = b.get(&format!("{prefix}.k"))?;
        let wv = b.get(&format!("{prefix}.v"))?;
        let wo = b.get(&format!("{prefix}.o"))?;
        let dh = tape.shape(wq)[1];
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(context, wk)?;
        let v = tape.matmul(context, wv)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax(s)?;
        let o = tape.matmul(a, v)?;
        Ok(tape.matmul(o, wo)?)
    }

    /// Fuse token streams `f_i: [n_i, d]` and `f_r: [n_r, d]`; returns the
    /// image stream `[n_i, d]`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, prefix: &str, f_i: Var, f_r: Var) -> Result<Var> {
        self.cfg.validate()?;
        let (si, sr) = (tape.shape(f_i).to_vec(), tape.shape(f_r).to_vec());
        if si.len() != 2 || sr.len() != 2 || si[1] != self.cfg.dim || sr[1] != self.cfg.dim {
            return Err(crate::tensor::TensorError::ShapeMismatch { op: "afb_forward", left: si, right: sr }.into());
        }
        let (mut x, mut y) = (f_i, f_r);
        for m in 0..self.cfg.modules {
            let p = format!("{prefix}.m{m}");
            let nx = tape.layer_norm(x)?;
            let a = Self::attention(tape, b, &format!("{p}.self_i"), nx, nx)?;
            x = tape.add(x, a)?;
            let ny = tape.layer_norm(y)?;
            let a = Self::attention(tape, b, &format!("{p}.self_r"), ny, ny)?;
            y = tape.add(y, a)?;

            let nx = tape.layer_norm(x)?;
            let ny = tape.layer_norm(y)?;
            let ax = Self::attention(tape, b, &format!("{p}.cross_i"), nx, ny)?;
            let ay = Self::attention(tape, b, &format!("{p}.cross_r"), ny, nx)?;
            x = tape.add(x, ax)?;
            y = tape.add(y, ay)?;
        }
        Ok(x)
    }
}

// ---------------------------------------------------------------------------
// residual depth and its loss

/// `max(d_m + d_res, 0)` elementwise.
pub fn residual_compose(d_m: &DepthMap, d_res: &[f32]) -> Result<DepthMap> {
    if d_res.len() != d_m.len() {
        return Err(Error::GridLength { width: d_m.width(), height: d_m.height(), len: d_res.len() });
    }
    let values = d_m.values().iter().zip(d_res).map(|(m, r)| (m + r).max(0.0)).collect();
    DepthMap::new(d_m.width(), d_m.height(), values, d_m.kind())
}

/// Two-term L1 loss: mean absolute error against the accumulated LiDAR
/// on its valid pixels plus `lambda` times the same against the
/// interpolated LiDAR. An empty mask contributes nothing; both empty is an
/// error.
pub fn depth_loss(d_hat: &DepthMap, d_acc: &DepthMap, d_int: &DepthMap, lambda: f64) -> Result<f64> {
    d_hat.ensure_same_dims("prediction", d_acc, "accumulated depth")?;
    d_hat.ensure_same_dims("prediction", d_int, "interpolated depth")?;
    let term = |target: &DepthMap| {
        let e: Vec<f64> = target
            .valid_iter()
            .map(|(r, c, t)| (f64::from(t) - f64::from(d_hat.get(r, c))).abs())
            .collect();
        (pairwise_sum(&e), e.len())
    };
    let (sa, na) = term(d_acc);
    let (si, ni) = term(d_int);
    if na == 0 && ni == 0 {
        return Err(Error::EmptySet("depth supervision"));
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(mean(sa, na) + lambda * mean(si, ni))
}

// ---------------------------------------------------------------------------
// toy networks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyNetConfig {
    /// Encoder channel width per scale; scale `s` runs at `1/2^s` resolution.
    pub channels: Vec<usize>,
    /// Add encoder features back in the decoder.
    pub skip: bool,
    pub saeb: SaebConfig,
    /// Stacked modules in the attention fusion block.
    pub afb_modules: usize,
    pub afb_head_dim: usize,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self { channels: vec![8, 16, 32], skip: true, saeb: SaebConfig::default(), afb_modules: 2, afb_head_dim: 16 }
    }
}

impl ToyNetConfig {
    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales() < 2 {
            return Err(Error::InvalidParam(format!("toy networks need at least 2 scales, got {}", self.scales())));
        }
        if self.channels.iter().any(|c| *c == 0) || self.saeb.spatial_kernel % 2 == 0 || self.saeb.reduction == 0 {
            return Err(Error::InvalidParam(format!("invalid toy network config {self:?}")));
        }
        Ok(())
    }

    /// Input sizes must survive `S - 1` halvings.
    pub fn check_input(&self, width: usize, height: usize) -> Result<()> {
        let f = 1usize << (self.scales() - 1);
        if width % f != 0 || height % f != 0 || width == 0 || height == 0 {
            return Err(Error::InvalidParam(format!(
                "input {width}x{height} is not divisible by {f} for {} scales",
                self.scales()
            )));
        }
        Ok(())
    }
}

fn depth_tensor(maps: &[&DepthMap]) -> Tensor {
    let (w, h) = maps[0].dims();
    let c = maps.len();
    Tensor::from_fn(&[h, w, c], |i| f64::from(maps[i % c].values()[i / c]) / DEPTH_SCALE)
}

fn image_tensor(img: &Image) -> Tensor {
    let (w, h) = img.dims();
    Tensor::from_fn(&[h, w, Image::CHANNELS], |i| f64::from(img.values()[i]))
}

/// Encoder: conv + ReLU per scale, halving resolution between scales.
fn encoder_params(prefix: &str, cin: usize, channels: &[usize], out: &mut Vec<ParamSpec>) {
    let mut c_prev = cin;
    for (s, &c) in channels.iter().enumerate() {
        out.extend(Conv { cin: c_prev, cout: c, k: 3 }.params(&format!("{prefix}.enc{s}")));
        c_prev = c;
    }
}

fn encoder_step(tape: &mut Tape, b: &Bound, prefix: &str, s: usize, x: Var) -> Result<Var> {
    let x = if s > 0 { tape.avg_pool2(x)? } else { x };
    let y = Conv::forward(tape, b, &format!("{prefix}.enc{s}"), x)?;
    Ok(tape.relu(y))
}

fn decoder_params(channels: &[usize], out: &mut Vec<ParamSpec>) {
    for s in 0..channels.len() - 1 {
        out.extend(Conv { cin: channels[s + 1], cout: channels[s], k: 3 }.params(&format!("dec{s}")));
    }
    out.extend(Conv { cin: channels[0], cout: 1, k: 3 }.params("head"));
}

/// Upsample, convolve and optionally add skip features, coarse to fine;
/// returns the one-channel head output.
fn decode(tape: &mut Tape, b: &Bound, cfg: &ToyNetConfig, bottleneck: Var, skips: &[Var]) -> Result<Var> {
    let mut d = bottleneck;
    for s in (0..cfg.scales() - 1).rev() {
        d = tape.upsample2(d)?;
        d = Conv::forward(tape, b, &format!("dec{s}"), d)?;
        d = tape.relu(d);
        if cfg.skip {
            d = tape.add(d, skips[s])?;
        }
    }
    Conv::forward(tape, b, "head", d)
}

/// Residual depth network guided by monocular structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMsgNet {
    pub cfg: ToyNetConfig,
}

impl ToyMsgNet {
    pub fn new(cfg: ToyNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let ch = &self.cfg.channels;
        let mut v = Vec::new();
        encoder_params("mono", 1, ch, &mut v);
        encoder_params("radar", 2, ch, &mut v);
        for (s, &c) in ch.iter().enumerate() {
            v.extend(Saeb { c_m: c, c_r: c, cfg: self.cfg.saeb }.params(&format!("saeb{s}")));
        }
        decoder_params(ch, &mut v);
        v
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        ParamStore::init(&self.params(), seed)
    }

    pub fn zeros(&self) -> ParamStore {
        ParamStore::zeros(&self.params())
    }

    /// Records the network; returns the composed depth `[h, w, 1]` in metres.
    pub fn graph(&self, tape: &mut Tape, b: &Bound, d_m: &DepthMap, d_er: &EnhancedRadarDepth) -> Result<Var> {
        d_m.ensure_same_dims("mono depth", d_er.raw(), "radar input")?;
        self.cfg.check_input(d_m.width(), d_m.height())?;
        let mono_in = depth_tensor(&[d_m]);
        let mono = tape.constant(mono_in.clone());
        let radar = tape.constant(depth_tensor(&[d_er.raw(), d_er.filtered()]));

        let (mut fm, mut fr) = (mono, radar);
        let mut fused = Vec::with_capacity(self.cfg.scales());
        for s in 0..self.cfg.scales() {
            fm = encoder_step(tape, b, "mono", s, fm)?;
            fr = encoder_step(tape, b, "radar", s, fr)?;
            let fe = Saeb::forward(tape, b, &format!("saeb{s}"), fm, fr)?;
            fused.push(tape.add(fm, fe)?);
            fr = fe;
        }
        let top = *fused.last().unwrap();
        let res = decode(tape, b, &self.cfg, top, &fused)?;
        // back to metres, then max(d_m + residual, 0)
        let res = tape.scale(res, DEPTH_SCALE);
        let base = tape.constant(Tensor::from_fn(mono_in.shape(), |i| f64::from(d_m.values()[i])));
        let sum = tape.add(base, res)?;
        Ok(tape.relu(sum))
    }

    pub fn forward(&self, weights: &ParamStore, d_m: &DepthMap, d_er: &EnhancedRadarDepth) -> Result<DepthMap> {
        weights.check(&self.params())?;
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, weights, false);
        let out = self.graph(&mut tape, &b, d_m, d_er)?;
        let values = tape.value(out).data().iter().map(|v| *v as f32).collect();
        DepthMap::new(d_m.width(), d_m.height(), values, MapKind::Dense)
    }

    /// Records the network and the depth loss against `(d_acc, d_int)`.
    pub fn loss_graph(&self, tape: &mut Tape, b: &Bound, sample: &DepthSample) -> Result<Var> {
        let pred = self.graph(tape, b, &sample.mono, &sample.radar)?;
        let target = |m: &DepthMap| -> (Vec<f64>, Vec<bool>) {
            (m.values().iter().map(|v| f64::from(*v)).collect(), m.values().iter().map(|v| *v > 0.0).collect())
        };
        let (ta, ma) = target(&sample.acc);
        let (ti, mi) = target(&sample.int);
        if !ma.iter().chain(&mi).any(|v| *v) {
            return Err(Error::EmptySet("depth supervision"));
        }
        let la = tape.masked_l1(pred, &ta, &ma)?;
        let li = tape.masked_l1(pred, &ti, &mi)?;
        let li = tape.scale(li, sample.lambda);
        Ok(tape.add(la, li)?)
    }
}

/// Everything the depth network trains on for one frame.
#[derive(Debug, Clone)]
pub struct DepthSample {
    pub mono: DepthMap,
    pub radar: EnhancedRadarDepth,
    pub acc: DepthMap,
    pub int: DepthMap,
    pub lambda: f64,
}

/// Association confidence network.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRcaNet {
    pub cfg: ToyNetConfig,
}

impl ToyRcaNet {
    pub fn new(cfg: ToyNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn afb(&self) -> Afb {
        let dim = *self.cfg.channels.last().unwrap();
        Afb { cfg: AfbConfig { modules: self.cfg.afb_modules, dim, head_dim: self.cfg.afb_head_dim } }
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let ch = &self.cfg.channels;
        let mut v = Vec::new();
        encoder_params("image", Image::CHANNELS, ch, &mut v);
        encoder_params("depth", 1, ch, &mut v);
        v.extend(self.afb().params("afb"));
        decoder_params(ch, &mut v);
        v
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        ParamStore::init(&self.params(), seed)
    }

    pub fn zeros(&self) -> ParamStore {
        ParamStore::zeros(&self.params())
    }

    /// Records the network; returns confidence logits `[h, w, 1]`.
    pub fn graph(&self, tape: &mut Tape, b: &Bound, image: &Image, d_dr: &DepthMap) -> Result<Var> {
        if image.dims() != d_dr.dims() {
            return Err(Error::shape("image", image.dims(), "dilated depth", d_dr.dims()));
        }
        self.cfg.check_input(d_dr.width(), d_dr.height())?;
        let (mut fi, mut fd) = (tape.constant(image_tensor(image)), tape.constant(depth_tensor(&[d_dr])));
        let mut skips = Vec::with_capacity(self.cfg.scales());
        for s in 0..self.cfg.scales() {
            fi = encoder_step(tape, b, "image", s, fi)?;
            fd = encoder_step(tape, b, "depth", s, fd)?;
            skips.push(tape.add(fi, fd)?);
        }
        let shape = tape.shape(fi).to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let ti = tape.reshape(fi, &[h * w, c])?;
        let td = tape.reshape(fd, &[h * w, c])?;
        let fused = self.afb().forward(tape, b, "afb", ti, td)?;
        let top = tape.reshape(fused, &[h, w, c])?;
        decode(tape, b, &self.cfg, top, &skips)
    }

    /// Confidence in `[0, 1]`, valid and non-zero only on the dilated region.
    pub fn forward(&self, weights: &ParamStore, image: &Image, d_dr: &DepthMap) -> Result<ConfidenceMap> {
        weights.check(&self.params())?;
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, weights, false);
        let logits = self.graph(&mut tape, &b, image, d_dr)?;
        let region = d_dr.valid_pixels();
        let values = tape
            .value(logits)
            .data()
            .iter()
            .map(|z| (1.0 / (1.0 + (-z).exp())) as f32)
            .collect();
        ConfidenceMap::new(d_dr.width(), d_dr.height(), values, region)
    }

    /// Records the network and the BCE loss against the target confidence
    /// on its valid pixels.
    pub fn loss_graph(&self, tape: &mut Tape, b: &Bound, sample: &ConfidenceSample) -> Result<Var> {
        let logits = self.graph(tape, b, &sample.image, &sample.ddr)?;
        let mask: Vec<bool> = sample.targets.validity().bits().to_vec();
        if !mask.iter().any(|v| *v) {
            return Err(Error::EmptySet("association region"));
        }
        let target: Vec<f64> = sample.targets.values().iter().map(|v| f64::from(*v)).collect();
        Ok(tape.bce_with_logits(logits, &target, &mask)?)
    }
}

/// Everything the association network trains on for one frame.
#[derive(Debug, Clone)]
pub struct ConfidenceSample {
    pub image: Image,
    pub ddr: DepthMap,
    pub targets: ConfidenceMap,
}

pub fn toy_msgnet_forward(
    d_m: &DepthMap,
    d_er: &EnhancedRadarDepth,
    cfg: &ToyNetConfig,
    weights: &ParamStore,
) -> Result<DepthMap> {
    ToyMsgNet::new(cfg.clone())?.forward(weights, d_m, d_er)
}

pub fn toy_rcanet_forward(
    image: &Image,
    d_dr: &DepthMap,
    cfg: &ToyNetConfig,
    weights: &ParamStore,
) -> Result<ConfidenceMap> {
    ToyRcaNet::new(cfg.clone())?.forward(weights, image, d_dr)
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(3e-3)
    }
}

/// Optimizer state across steps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    opt: Optimizer,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl OptimizerState {
    pub fn new(opt: Optimizer) -> Self {
        Self { opt, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.t += 1;
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?.data_mut();
            match self.opt {
                Optimizer::Sgd { lr } => {
                    p.iter_mut().zip(g.data()).for_each(|(w, gv)| *w -= lr * gv);
                }
                Optimizer::Adam { lr, beta1, beta2, eps } => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, optimizer: Optimizer::default() }
    }
}

/// `losses[k]` is the loss before update `k`; the final entry is the loss
/// after the last update, so there are `steps + 1` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().unwrap()
    }

    /// Fractional reduction from the first to the last loss.
    pub fn reduction(&self) -> f64 {
        1.0 - self.last() / self.initial()
    }
}

/// Full-batch training: evaluate `loss`, backpropagate, update, repeat.
pub fn train(
    weights: &mut ParamStore,
    cfg: &TrainConfig,
    mut loss: impl FnMut(&mut Tape, &Bound) -> Result<Var>,
) -> Result<LossCurve> {
    let mut state = OptimizerState::new(cfg.optimizer);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, weights, step < cfg.steps);
        let l = loss(&mut tape, &b)?;
        let value = tape.value(l).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss became {value} at step {step}")));
        }
        losses.push(value);
        if step == cfg.steps {
            break;
        }
        let grads = tape.backward(l)?;
        state.step(weights, &b.gradients(&tape, &grads))?;
    }
    Ok(LossCurve { losses })
}

pub fn train_msgnet(
    net: &ToyMsgNet,
    weights: &mut ParamStore,
    sample: &DepthSample,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    weights.check(&net.params())?;
    train(weights, cfg, |tape, b| net.loss_graph(tape, b, sample))
}

pub fn train_rcanet(
    net: &ToyRcaNet,
    weights: &mut ParamStore,
    sample: &ConfidenceSample,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    weights.check(&net.params())?;
    train(weights, cfg, |tape, b| net.loss_graph(tape, b, sample))
}
