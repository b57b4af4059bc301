//! A small dense tensor type with a reverse-mode gradient tape.
//!
//! Feature maps are laid out `[height, width, channels]`, matrices
//! `[rows, cols]`, and scalars have the empty shape `[]`. Storage is `f64`
//! so that central finite differences stay well above rounding noise.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record in reverse and returns gradients for every leaf created
//! with [`Tape::leaf`]. Inputs created with [`Tape::constant`] receive none.
//!
//! ```
//! use sarcd_core::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::fmt;

use crate::numeric::pairwise_sum;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: unsupported shape {shape:?} ({reason})")]
    BadShape { op: &'static str, shape: Vec<usize>, reason: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("buffer of {len} values cannot have shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> TensorResult<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    fn hwc(&self, op: &'static str) -> TensorResult<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(TensorError::BadShape { op, shape: self.shape.clone(), reason: "expected [h, w, c]" }),
        }
    }

    fn matrix(&self, op: &'static str) -> TensorResult<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(TensorError::BadShape { op, shape: self.shape.clone(), reason: "expected [rows, cols]" }),
        }
    }

    fn last_axis(&self, op: &'static str) -> TensorResult<usize> {
        match self.shape.last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(TensorError::BadShape { op, shape: self.shape.clone(), reason: "needs a non-empty last axis" }),
        }
    }

    fn same_shape(&self, op: &'static str, other: &Tensor) -> TensorResult<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Gate {
    Channel,
    Spatial,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Concat(Var, Var),
    Conv2d { x: Var, kernel: Var, bias: Option<Var> },
    Sigmoid(Var),
    Relu(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool(Var, Vec<usize>),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    BroadcastMul(Var, Var, Gate),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    AvgPool2(Var),
    Upsample2(Var),
    LayerNorm(Var, Vec<f64>),
    MaskedL1 { pred: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
    BceWithLogits { logits: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations, in execution order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> TensorResult<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(op, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let out = Tensor { shape: x.shape.clone(), data };
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, make(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let out = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|v| v * factor).collect() };
        let g = self.grad_of(&[a]);
        self.push(out, Op::Scale(a, factor), g)
    }

    /// `x[.., c] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.last_axis("add_bias")?;
        if bv.shape != [c] {
            return Err(TensorError::ShapeMismatch { op: "add_bias", left: xv.shape.clone(), right: bv.shape.clone() });
        }
        let data = xv.data.iter().enumerate().map(|(i, v)| v + bv.data[i % c]).collect();
        let out = Tensor { shape: xv.shape.clone(), data };
        let g = self.grad_of(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), g))
    }

    /// Concatenate two `[h, w, *]` maps along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (h, w, ca) = x.hwc("concat")?;
        let (h2, w2, cb) = y.hwc("concat")?;
        if (h, w) != (h2, w2) {
            return Err(TensorError::ShapeMismatch { op: "concat", left: x.shape.clone(), right: y.shape.clone() });
        }
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        for p in 0..h * w {
            data.extend_from_slice(&x.data[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&y.data[p * cb..(p + 1) * cb]);
        }
        let out = Tensor { shape: vec![h, w, ca + cb], data };
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), g))
    }

    /// Stride-1, zero-padded "same" convolution.
    ///
    /// `x: [h, w, c_in]`, `kernel: [k, k, c_in, c_out]` with odd `k`,
    /// `bias: [c_out]`. Output is `[h, w, c_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> TensorResult<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let (h, w, cin) = xv.hwc("conv2d")?;
        let (k, cout) = match kv.shape[..] {
            [k1, k2, ci, co] if k1 == k2 && k1 % 2 == 1 && ci == cin => (k1, co),
            _ => {
                return Err(TensorError::ShapeMismatch { op: "conv2d", left: xv.shape.clone(), right: kv.shape.clone() })
            }
        };
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape != [cout] {
                return Err(TensorError::ShapeMismatch { op: "conv2d bias", left: kv.shape.clone(), right: bv.shape.clone() });
            }
        }
        let pad = k / 2;
        let mut out = vec![0.0; h * w * cout];
        if let Some(b) = bias {
            let bd = &self.value(b).data;
            for px in out.chunks_exact_mut(cout) {
                px.copy_from_slice(bd);
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = xx as isize + dx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = &xv.data[(sy as usize * w + sx as usize) * cin..][..cin];
                        let kbase = (dy * k + dx) * cin * cout;
                        for (ci, &s) in src.iter().enumerate() {
                            if s == 0.0 {
                                continue;
                            }
                            let krow = &kv.data[kbase + ci * cout..][..cout];
                            for (ov, kw) in o.iter_mut().zip(krow) {
                                *ov += s * kw;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor { shape: vec![h, w, cout], data: out };
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let g = self.grad_of(&deps);
        Ok(self.push(value, Op::Conv2d { x, kernel, bias }, g))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let out = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|v| f(*v)).collect() };
        let g = self.grad_of(&[a]);
        self.push(out, op, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    /// `[h, w, c] -> [1, 1, c]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> TensorResult<Var> {
        let x = self.value(a);
        let (h, w, c) = x.hwc("global_avg_pool")?;
        let n = (h * w) as f64;
        let data = (0..c)
            .map(|ch| {
                let col: Vec<f64> = (0..h * w).map(|p| x.data[p * c + ch]).collect();
                pairwise_sum(&col) / n
            })
            .collect();
        let out = Tensor { shape: vec![1, 1, c], data };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::GlobalAvgPool(a), g))
    }

    /// `[h, w, c] -> [1, 1, c]` spatial max; ties go to the first pixel.
    pub fn global_max_pool(&mut self, a: Var) -> TensorResult<Var> {
        let x = self.value(a);
        let (h, w, c) = x.hwc("global_max_pool")?;
        let mut arg = vec![0usize; c];
        let mut data = vec![f64::NEG_INFINITY; c];
        for p in 0..h * w {
            for ch in 0..c {
                let v = x.data[p * c + ch];
                if v > data[ch] {
                    data[ch] = v;
                    arg[ch] = p * c + ch;
                }
            }
        }
        let out = Tensor { shape: vec![1, 1, c], data };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::GlobalMaxPool(a, arg), g))
    }

    /// `[h, w, c] -> [h, w, 1]` mean over channels.
    pub fn channel_mean(&mut self, a: Var) -> TensorResult<Var> {
        let x = self.value(a);
        let (h, w, c) = x.hwc("channel_mean")?;
        let data = x.data.chunks_exact(c).map(|px| pairwise_sum(px) / c as f64).collect();
        let out = Tensor { shape: vec![h, w, 1], data };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::ChannelMean(a), g))
    }

    /// `[h, w, c] -> [h, w, 1]` max over channels; ties go to the first channel.
    pub fn channel_max(&mut self, a: Var) -> TensorResult<Var> {
        let x = self.value(a);
        let (h, w, c) = x.hwc("channel_max")?;
        let mut arg = Vec::with_capacity(h * w);
        let mut data = Vec::with_capacity(h * w);
        for (p, px) in x.data.chunks_exact(c).enumerate() {
            let mut best = 0;
            for (i, v) in px.iter().enumerate() {
                if *v > px[best] {
                    best = i;
                }
            }
            arg.push(p * c + best);
            data.push(px[best]);
        }
        let out = Tensor { shape: vec![h, w, 1], data };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::ChannelMax(a, arg), g))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = x.matrix("matmul")?;
        let (k2, n) = y.matrix("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: x.shape.clone(), right: y.shape.clone() });
        }
        let data = matmul_raw(&x.data, &y.data, m, k, n);
        let out = Tensor { shape: vec![m, n], data };
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let x = self.value(a);
        let (m, n) = x.matrix("transpose")?;
        let data = transpose_raw(&x.data, m, n);
        let out = Tensor { shape: vec![n, m], data };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Transpose(a), g))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> TensorResult<Var> {
        let x = self.value(a);
        let n = x.last_axis("softmax")?;
        let mut data = Vec::with_capacity(x.len());
        for row in x.data.chunks_exact(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s = pairwise_sum(&e);
            data.extend(e.iter().map(|v| v / s));
        }
        let out = Tensor { shape: x.shape.clone(), data };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Softmax(a), g))
    }

    /// Gate a `[h, w, c]` map by a channel vector `[1, 1, c]` or a spatial
    /// map `[h, w, 1]`.
    pub fn broadcast_mul(&mut self, x: Var, gate: Var) -> TensorResult<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        let (h, w, c) = xv.hwc("broadcast_mul")?;
        let kind = match gv.shape[..] {
            [1, 1, gc] if gc == c => Gate::Channel,
            [gh, gw, 1] if gh == h && gw == w => Gate::Spatial,
            _ => {
                return Err(TensorError::ShapeMismatch { op: "broadcast_mul", left: xv.shape.clone(), right: gv.shape.clone() })
            }
        };
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv.data[if kind == Gate::Channel { i % c } else { i / c }])
            .collect();
        let out = Tensor { shape: xv.shape.clone(), data };
        let g = self.grad_of(&[x, gate]);
        Ok(self.push(out, Op::BroadcastMul(x, gate, kind), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: x.shape.clone(), right: shape.to_vec() });
        }
        let out = Tensor { shape: shape.to_vec(), data: x.data.clone() };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Reshape(a), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(pairwise_sum(&self.value(a).data));
        let g = self.grad_of(&[a]);
        self.push(out, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(pairwise_sum(&x.data) / x.len().max(1) as f64);
        let g = self.grad_of(&[a]);
        self.push(out, Op::Mean(a), g)
    }

    /// 2x2 average pooling, `[h, w, c] -> [h/2, w/2, c]` (even `h`, `w`).
    pub fn avg_pool2(&mut self, a: Var) -> TensorResult<Var> {
        let x = self.value(a);
        let (h, w, c) = x.hwc("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::BadShape { op: "avg_pool2", shape: x.shape.clone(), reason: "needs even spatial dims" });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let at = |r: usize, q: usize| x.data[(r * w + q) * c + ch];
                    data[(y * ow + xx) * c + ch] = 0.25
                        * (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1));
                }
            }
        }
        let out = Tensor { shape: vec![oh, ow, c], data };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::AvgPool2(a), g))
    }

    /// Nearest-neighbour 2x upsampling, `[h, w, c] -> [2h, 2w, c]`.
    pub fn upsample2(&mut self, a: Var) -> TensorResult<Var> {
        let x = self.value(a);
        let (h, w, c) = x.hwc("upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((y / 2) * w + xx / 2) * c;
                data[(y * ow + xx) * c..][..c].copy_from_slice(&x.data[src..src + c]);
            }
        }
        let out = Tensor { shape: vec![oh, ow, c], data };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Upsample2(a), g))
    }

    /// Normalize each last-axis row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> TensorResult<Var> {
        let x = self.value(a);
        let n = x.last_axis("layer_norm")?;
        let mut data = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(x.len() / n);
        for row in x.data.chunks_exact(n) {
            let mu = pairwise_sum(row) / n as f64;
            let centered: Vec<f64> = row.iter().map(|v| v - mu).collect();
            let var = pairwise_sum(&centered.iter().map(|d| d * d).collect::<Vec<_>>()) / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            data.extend(centered.iter().map(|d| d * r));
        }
        let out = Tensor { shape: x.shape.clone(), data };
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::LayerNorm(a, rstd), g))
    }

    /// Mean absolute difference to a fixed target over the masked entries.
    pub fn masked_l1(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> TensorResult<Var> {
        let p = self.value(pred);
        if target.len() != p.len() || mask.len() != p.len() {
            return Err(TensorError::ShapeMismatch { op: "masked_l1", left: p.shape.clone(), right: vec![target.len()] });
        }
        let terms: Vec<f64> =
            (0..p.len()).filter(|&i| mask[i]).map(|i| (p.data[i] - target[i]).abs()).collect();
        let count = terms.len();
        let value = if count == 0 { 0.0 } else { pairwise_sum(&terms) / count as f64 };
        let g = self.grad_of(&[pred]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedL1 { pred, target: target.to_vec(), mask: mask.to_vec(), count },
            g,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target` over
    /// the masked entries, computed in the stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64], mask: &[bool]) -> TensorResult<Var> {
        let z = self.value(logits);
        if target.len() != z.len() || mask.len() != z.len() {
            return Err(TensorError::ShapeMismatch { op: "bce_with_logits", left: z.shape.clone(), right: vec![target.len()] });
        }
        let terms: Vec<f64> = (0..z.len())
            .filter(|&i| mask[i])
            .map(|i| softplus(z.data[i]) - target[i] * z.data[i])
            .collect();
        let count = terms.len();
        let value = if count == 0 { 0.0 } else { pairwise_sum(&terms) / count as f64 };
        let g = self.grad_of(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::BceWithLogits { logits, target: target.to_vec(), mask: mask.to_vec(), count },
            g,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![1.0] });

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.propagate(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            let n = &self.nodes[id];
            if !(matches!(n.op, Op::Leaf) && n.needs_grad) {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(&n.value.shape));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.shape));
            f(&mut slot.data);
        };
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|d| (0..d.len()).for_each(|i| d[i] += gd[i] * bv.data[i]));
                acc(*b, &|d| (0..d.len()).for_each(|i| d[i] += gd[i] * av.data[i]));
            }
            Op::Scale(a, f) => acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += f * y)),
            Op::AddBias(x, b) => {
                acc(*x, &|d| d.iter_mut().zip(gd).for_each(|(p, q)| *p += q));
                let c = val(*b).len();
                acc(*b, &|d| {
                    for (i, v) in gd.iter().enumerate() {
                        d[i % c] += v;
                    }
                });
            }
            Op::Concat(a, b) => {
                let ca = val(*a).shape[2];
                let cb = val(*b).shape[2];
                let c = ca + cb;
                acc(*a, &|d| {
                    for (p, px) in d.chunks_exact_mut(ca).enumerate() {
                        px.iter_mut().zip(&gd[p * c..p * c + ca]).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*b, &|d| {
                    for (p, px) in d.chunks_exact_mut(cb).enumerate() {
                        px.iter_mut().zip(&gd[p * c + ca..(p + 1) * c]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Conv2d { x, kernel, bias } => {
                let xv = val(*x);
                let kv = val(*kernel);
                let (h, w, cin) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let (k, cout) = (kv.shape[0], kv.shape[3]);
                let pad = k / 2;
                let taps = |mut visit: Box<dyn FnMut(usize, usize, usize) + '_>| {
                    for y in 0..h {
                        for xx in 0..w {
                            for dy in 0..k {
                                let sy = y as isize + dy as isize - pad as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx in 0..k {
                                    let sx = xx as isize + dx as isize - pad as isize;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    visit(y * w + xx, sy as usize * w + sx as usize, (dy * k + dx) * cin * cout);
                                }
                            }
                        }
                    }
                };
                acc(*x, &|d| {
                    taps(Box::new(|op, sp, kbase| {
                        let go = &gd[op * cout..(op + 1) * cout];
                        for ci in 0..cin {
                            let krow = &kv.data[kbase + ci * cout..][..cout];
                            let s: f64 = go.iter().zip(krow).map(|(a, b)| a * b).sum();
                            d[sp * cin + ci] += s;
                        }
                    }))
                });
                acc(*kernel, &|d| {
                    taps(Box::new(|op, sp, kbase| {
                        let go = &gd[op * cout..(op + 1) * cout];
                        for ci in 0..cin {
                            let s = xv.data[sp * cin + ci];
                            if s == 0.0 {
                                continue;
                            }
                            let krow = &mut d[kbase + ci * cout..][..cout];
                            krow.iter_mut().zip(go).for_each(|(kd, gv)| *kd += s * gv);
                        }
                    }))
                });
                if let Some(b) = bias {
                    acc(*b, &|d| {
                        for px in gd.chunks_exact(cout) {
                            d.iter_mut().zip(px).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                let out = &node.value.data;
                acc(*a, &|d| (0..d.len()).for_each(|i| d[i] += gd[i] * out[i] * (1.0 - out[i])));
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &|d| (0..d.len()).for_each(|i| if x.data[i] > 0.0 { d[i] += gd[i] }));
            }
            Op::GlobalAvgPool(a) => {
                let s = val(*a).shape.clone();
                let (n, c) = (s[0] * s[1], s[2]);
                acc(*a, &|d| (0..d.len()).for_each(|i| d[i] += gd[i % c] / n as f64));
            }
            Op::GlobalMaxPool(a, arg) | Op::ChannelMax(a, arg) => {
                acc(*a, &|d| arg.iter().enumerate().for_each(|(o, &i)| d[i] += gd[o]));
            }
            Op::ChannelMean(a) => {
                let c = val(*a).shape[2];
                acc(*a, &|d| (0..d.len()).for_each(|i| d[i] += gd[i / c] / c as f64));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                acc(*a, &|d| {
                    let bt = transpose_raw(&bv.data, k, n);
                    let ga = matmul_raw(gd, &bt, m, n, k);
                    d.iter_mut().zip(ga).for_each(|(x, y)| *x += y);
                });
                acc(*b, &|d| {
                    let at = transpose_raw(&av.data, m, k);
                    let gb = matmul_raw(&at, gd, k, m, n);
                    d.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape[0], node.value.shape[1]);
                acc(*a, &|d| {
                    let back = transpose_raw(gd, n, m);
                    d.iter_mut().zip(back).for_each(|(x, y)| *x += y);
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape.last().unwrap();
                acc(*a, &|d| {
                    for (r, (yr, gr)) in y.data.chunks_exact(n).zip(gd.chunks_exact(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            d[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::BroadcastMul(x, gate, kind) => {
                let (xv, gv) = (val(*x), val(*gate));
                let c = xv.shape[2];
                let gi = |i: usize| if *kind == Gate::Channel { i % c } else { i / c };
                acc(*x, &|d| (0..d.len()).for_each(|i| d[i] += gd[i] * gv.data[gi(i)]));
                acc(*gate, &|d| (0..xv.len()).for_each(|i| d[gi(i)] += gd[i] * xv.data[i]));
            }
            Op::Reshape(a) => acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y)),
            Op::Sum(a) => acc(*a, &|d| d.iter_mut().for_each(|x| *x += gd[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &|d| d.iter_mut().for_each(|x| *x += gd[0] / n));
            }
            Op::AvgPool2(a) => {
                let s = &val(*a).shape;
                let (w, c) = (s[1], s[2]);
                let ow = w / 2;
                acc(*a, &|d| {
                    for (i, v) in d.iter_mut().enumerate() {
                        let ch = i % c;
                        let p = i / c;
                        let (y, xx) = (p / w, p % w);
                        *v += 0.25 * gd[((y / 2) * ow + xx / 2) * c + ch];
                    }
                });
            }
            Op::Upsample2(a) => {
                let s = &val(*a).shape;
                let (w, c) = (s[1], s[2]);
                let ow = 2 * w;
                acc(*a, &|d| {
                    for (o, gv) in gd.iter().enumerate() {
                        let ch = o % c;
                        let p = o / c;
                        let (y, xx) = (p / ow, p % ow);
                        d[((y / 2) * w + xx / 2) * c + ch] += gv;
                    }
                });
            }
            Op::LayerNorm(a, rstd) => {
                let y = &node.value;
                let n = *y.shape.last().unwrap();
                acc(*a, &|d| {
                    for (r, (yr, gr)) in y.data.chunks_exact(n).zip(gd.chunks_exact(n)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[r * n + j] += rstd[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::MaskedL1 { pred, target, mask, count } => {
                if *count > 0 {
                    let p = val(*pred);
                    let s = gd[0] / *count as f64;
                    acc(*pred, &|d| {
                        for i in 0..d.len() {
                            if mask[i] {
                                let diff = p.data[i] - target[i];
                                if diff > 0.0 {
                                    d[i] += s;
                                } else if diff < 0.0 {
                                    d[i] -= s;
                                }
                            }
                        }
                    });
                }
            }
            Op::BceWithLogits { logits, target, mask, count } => {
                if *count > 0 {
                    let z = val(*logits);
                    let s = gd[0] / *count as f64;
                    acc(*logits, &|d| {
                        for i in 0..d.len() {
                            if mask[i] {
                                d[i] += s * (sigmoid(z.data[i]) - target[i]);
                            }
                        }
                    });
                }
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(&x.shape);
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `max_i |a_i - b_i| / max_i |b_i|`: the largest deviation measured
/// against the scale of the reference gradient `b`.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape, "gradient shapes differ");
    let scale = b.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = a.data.iter().zip(&b.data).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    if scale == 0.0 {
        dev
    } else {
        dev / scale
    }
}
