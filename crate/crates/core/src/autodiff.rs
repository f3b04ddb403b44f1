//! Reverse-mode differentiation over dense `(channels, height, width)`
//! tensors, with the handful of primitives the inverse-rendering network
//! needs, a finite-difference gradient checker, and Adam.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_strided, StridedView};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor { c, h, w, data: vec![value; c * h * w] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::filled(1, 1, 1, value)
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!("{} values for a {c}x{h}x{w} tensor", data.len())));
        }
        Ok(Tensor { c, h, w, data })
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn(c: usize, h: usize, w: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("standard deviation is finite and nonnegative");
        Tensor { c, h, w, data: (0..c * h * w).map(|_| normal.sample(rng)).collect() }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// The single value of a `1 x 1 x 1` tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }
}

/// A linear map between tensors with its adjoint, usable as a tape node.
pub trait LinearOperator {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn apply_transpose(&self, g: &Tensor) -> Result<Tensor>;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv3x3 { x: Var, w: Var, b: Var },
    Conv1x1 { x: Var, w: Var, b: Var },
    ChannelNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Relu { x: Var },
    LRelu { x: Var, slope: f64 },
    L2Normalize { x: Var, norms: Vec<f64> },
    Concat { xs: Vec<Var> },
    Hadamard { a: Var, b: Var },
    ScalarMul { x: Var, s: f64 },
    Add { a: Var, b: Var },
    AddConst { x: Var },
    ChannelDot { x: Var, v: Vec<f64> },
    ChannelSlice { x: Var, start: usize },
    MaskedMeanAbs { x: Var, mask: Rc<Vec<bool>>, count: usize },
    MaskedMeanSq { x: Var, mask: Rc<Vec<bool>>, count: usize },
    Sum { x: Var },
    Linear { x: Var, op: Rc<dyn LinearOperator> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv3x3 { x, w, b } | Op::Conv1x1 { x, w, b } => vec![*x, *w, *b],
            Op::ChannelNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs } => xs.clone(),
            Op::Hadamard { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::Relu { x }
            | Op::LRelu { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::ScalarMul { x, .. }
            | Op::AddConst { x }
            | Op::ChannelDot { x, .. }
            | Op::ChannelSlice { x, .. }
            | Op::MaskedMeanAbs { x, .. }
            | Op::MaskedMeanSq { x, .. }
            | Op::Sum { x }
            | Op::Linear { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward values in evaluation order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.c, like.h, like.w))
    }
}

/// Zero-padded copy of `x`: each channel becomes `(h + 2) x (w + 2)` plus
/// two trailing zeros, so every 3x3 tap is a contiguous window.
fn pad(x: &Tensor) -> (Vec<f64>, usize) {
    let (c, h, w) = x.shape();
    let w2 = w + 2;
    let stride = (h + 2) * w2 + 2;
    let mut out = vec![0.0; c * stride];
    for ch in 0..c {
        let src = x.channel(ch);
        for y in 0..h {
            let dst = ch * stride + (y + 1) * w2 + 1;
            out[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    (out, stride)
}

/// Offset of tap `t` (row-major in the 3x3 window) inside a padded channel.
fn tap_offset(t: usize, w2: usize) -> usize {
    (t / 3) * w2 + t % 3
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a parameter or any input whose gradient is wanted.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// 3x3 convolution, stride 1, zero padding 1. `w` has shape
    /// `(out, in, 9)` with taps in row-major order; `b` has `(out, 1, 1)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (ci, h, wd) = xt.shape();
        let co = wt.c;
        if wt.h != ci || wt.w != 9 || bt.shape() != (co, 1, 1) || h == 0 || wd == 0 {
            return Err(Error::primitive(
                "conv2d_3x3",
                format!("input {:?}, weight {:?}, bias {:?}", xt.shape(), wt.shape(), bt.shape()),
            ));
        }
        let (xp, stride) = pad(xt);
        let w2 = wd + 2;
        let n = h * w2;
        // Rows of width w + 2; the last two columns of each row are discarded.
        let mut wide = vec![0.0; co * n];
        for t in 0..9 {
            gemm_strided(
                co,
                ci,
                n,
                1.0,
                &wt.data,
                StridedView { offset: t, row_stride: ci * 9, col_stride: 9 },
                &xp,
                StridedView { offset: tap_offset(t, w2), row_stride: stride, col_stride: 1 },
                1.0,
                &mut wide,
                StridedView::row_major(0, n),
            );
        }
        let mut out = Tensor::zeros(co, h, wd);
        for o in 0..co {
            for y in 0..h {
                let src = &wide[o * n + y * w2..o * n + y * w2 + wd];
                let dst = &mut out.data[(o * h + y) * wd..(o * h + y + 1) * wd];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bt.data[o];
                }
            }
        }
        Ok(self.push(out, Op::Conv3x3 { x, w, b }))
    }

    /// Pointwise convolution; `w` has shape `(out, in, 1)`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (ci, h, wd) = xt.shape();
        let co = wt.c;
        if wt.h != ci || wt.w != 1 || bt.shape() != (co, 1, 1) {
            return Err(Error::primitive(
                "conv2d_1x1",
                format!("input {:?}, weight {:?}, bias {:?}", xt.shape(), wt.shape(), bt.shape()),
            ));
        }
        let hw = h * wd;
        let mut out = Tensor::zeros(co, h, wd);
        for o in 0..co {
            out.data[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bt.data[o]);
        }
        gemm(co, ci, hw, 1.0, &wt.data, false, &xt.data, false, 1.0, &mut out.data);
        Ok(self.push(out, Op::Conv1x1 { x, w, b }))
    }

    /// Per-channel normalization over the spatial dimensions followed by a
    /// learned affine map; `gamma` and `beta` have shape `(c, 1, 1)`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let (c, h, w) = xt.shape();
        if gt.shape() != (c, 1, 1) || bt.shape() != (c, 1, 1) {
            return Err(Error::primitive("channel_norm", format!("input {:?}, affine {:?}", xt.shape(), gt.shape())));
        }
        let n = (h * w) as f64;
        let mut xhat = Tensor::zeros(c, h, w);
        let mut out = Tensor::zeros(c, h, w);
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let src = xt.channel(ch);
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let p = h * w;
            for k in 0..p {
                let z = (src[k] - mean) * inv;
                xhat.data[ch * p + k] = z;
                out.data[ch * p + k] = gt.data[ch] * z + bt.data[ch];
            }
        }
        Ok(self.push(out, Op::ChannelNorm { x, gamma, beta, xhat, inv_std }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn lrelu(&mut self, x: Var, slope: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope
            }
        });
        self.push(out, Op::LRelu { x, slope })
    }

    /// Scales each pixel's channel vector to unit length (zero stays zero).
    pub fn l2_normalize_channels(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, h, w) = xt.shape();
        let p = h * w;
        let mut norms = vec![0.0; p];
        for ch in 0..c {
            for (k, v) in xt.channel(ch).iter().enumerate() {
                norms[k] += v * v;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        let mut out = xt.clone();
        for ch in 0..c {
            for k in 0..p {
                out.data[ch * p + k] = if norms[k] > 0.0 { out.data[ch * p + k] / norms[k] } else { 0.0 };
            }
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::primitive("concat_channels", "no inputs"))?;
        let (_, h, w) = self.value(*first).shape();
        let mut data = Vec::new();
        let mut c = 0;
        for &v in xs {
            let t = self.value(v);
            if t.h != h || t.w != w {
                return Err(Error::primitive("concat_channels", format!("{:?} vs {h}x{w}", t.shape())));
            }
            data.extend_from_slice(&t.data);
            c += t.c;
        }
        Ok(self.push(Tensor { c, h, w, data }, Op::Concat { xs: xs.to_vec() }))
    }

    /// Elementwise product; a single-channel operand broadcasts over the
    /// other's channels.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.h != bt.h || at.w != bt.w || !(at.c == bt.c || at.c == 1 || bt.c == 1) {
            return Err(Error::primitive("hadamard", format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let c = at.c.max(bt.c);
        let p = at.plane();
        let mut out = Tensor::zeros(c, at.h, at.w);
        for ch in 0..c {
            let sa = at.channel(if at.c == 1 { 0 } else { ch });
            let sb = bt.channel(if bt.c == 1 { 0 } else { ch });
            for k in 0..p {
                out.data[ch * p + k] = sa[k] * sb[k];
            }
        }
        Ok(self.push(out, Op::Hadamard { a, b }))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::ScalarMul { x, s })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.same_shape(bt) {
            return Err(Error::primitive("add", format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let mut out = at.clone();
        out.add_assign(bt);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, x: Var, t: &Tensor) -> Result<Var> {
        let xt = self.value(x);
        if !xt.same_shape(t) {
            return Err(Error::primitive("add_const", format!("{:?} vs {:?}", xt.shape(), t.shape())));
        }
        let mut out = xt.clone();
        out.add_assign(t);
        Ok(self.push(out, Op::AddConst { x }))
    }

    /// Per-pixel dot product of the channel vector with a constant vector.
    pub fn channel_dot(&mut self, x: Var, v: &[f64]) -> Result<Var> {
        let xt = self.value(x);
        if xt.c != v.len() {
            return Err(Error::primitive("channel_dot", format!("{} channels vs {}-vector", xt.c, v.len())));
        }
        let p = xt.plane();
        let mut out = Tensor::zeros(1, xt.h, xt.w);
        for (ch, &s) in v.iter().enumerate() {
            for (o, x) in out.data.iter_mut().zip(xt.channel(ch)) {
                *o += s * x;
            }
        }
        debug_assert_eq!(out.data.len(), p);
        Ok(self.push(out, Op::ChannelDot { x, v: v.to_vec() }))
    }

    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if start + len > xt.c || len == 0 {
            return Err(Error::primitive("channel_slice", format!("channels {start}..{} of {}", start + len, xt.c)));
        }
        let p = xt.plane();
        let data = xt.data[start * p..(start + len) * p].to_vec();
        let out = Tensor { c: len, h: xt.h, w: xt.w, data };
        Ok(self.push(out, Op::ChannelSlice { x, start }))
    }

    /// Mean absolute value over all channels at the pixels where `mask`
    /// holds. Returns a scalar.
    pub fn masked_mean_abs(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let xt = self.value(x);
        let count = self.check_mask("masked_mean_abs", xt, &mask)?;
        let p = xt.plane();
        let mut sum = 0.0;
        for ch in 0..xt.c {
            for (k, v) in xt.data[ch * p..(ch + 1) * p].iter().enumerate() {
                if mask[k] {
                    sum += v.abs();
                }
            }
        }
        let out = Tensor::scalar(sum / (count * xt.c) as f64);
        Ok(self.push(out, Op::MaskedMeanAbs { x, mask, count }))
    }

    /// Squared channel norm averaged over the pixels where `mask` holds.
    pub fn masked_mean_sq(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let xt = self.value(x);
        let count = self.check_mask("masked_mean_sq", xt, &mask)?;
        let p = xt.plane();
        let mut sum = 0.0;
        for ch in 0..xt.c {
            for (k, v) in xt.data[ch * p..(ch + 1) * p].iter().enumerate() {
                if mask[k] {
                    sum += v * v;
                }
            }
        }
        let out = Tensor::scalar(sum / count as f64);
        Ok(self.push(out, Op::MaskedMeanSq { x, mask, count }))
    }

    fn check_mask(&self, name: &'static str, xt: &Tensor, mask: &[bool]) -> Result<usize> {
        if mask.len() != xt.plane() {
            return Err(Error::primitive(name, format!("mask of {} for a {}x{} plane", mask.len(), xt.h, xt.w)));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::primitive(name, "empty mask"));
        }
        Ok(count)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn linear(&mut self, x: Var, op: Rc<dyn LinearOperator>) -> Result<Var> {
        let out = op.apply(self.value(x))?;
        Ok(self.push(out, Op::Linear { x, op }))
    }

    /// Gradients of a scalar node with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_seed(loss, 1.0)
    }

    /// As [`Tape::backward`] with the upstream gradient of `loss` set to `seed`.
    pub fn backward_with_seed(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::LossNotOnTape);
        }
        if self.nodes[loss.0].value.shape() != (1, 1, 1) {
            return Err(Error::primitive("backward", "loss must be a 1x1x1 scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(seed));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.needs_grad(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3x3 { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (ci, h, wd) = xt.shape();
                let co = wt.c;
                let w2 = wd + 2;
                let n = h * w2;
                let mut gwide = vec![0.0; co * n];
                for o in 0..co {
                    for y in 0..h {
                        gwide[o * n + y * w2..o * n + y * w2 + wd].copy_from_slice(&g.data[(o * h + y) * wd..(o * h + y + 1) * wd]);
                    }
                }
                let gview = StridedView::row_major(0, n);
                if self.needs_grad(*w) {
                    let (xp, stride) = pad(xt);
                    let mut gw = Tensor::zeros(co, ci, 9);
                    for t in 0..9 {
                        let xv = StridedView { offset: tap_offset(t, w2), row_stride: stride, col_stride: 1 };
                        gemm_strided(
                            co,
                            n,
                            ci,
                            1.0,
                            &gwide,
                            gview,
                            &xp,
                            xv.transposed(),
                            0.0,
                            &mut gw.data,
                            StridedView { offset: t, row_stride: ci * 9, col_stride: 9 },
                        );
                    }
                    acc(*w, gw);
                }
                if self.needs_grad(*x) {
                    let stride = (h + 2) * w2 + 2;
                    let mut gp = vec![0.0; ci * stride];
                    for t in 0..9 {
                        gemm_strided(
                            ci,
                            co,
                            n,
                            1.0,
                            &wt.data,
                            StridedView { offset: t, row_stride: 9, col_stride: ci * 9 },
                            &gwide,
                            gview,
                            1.0,
                            &mut gp,
                            StridedView { offset: tap_offset(t, w2), row_stride: stride, col_stride: 1 },
                        );
                    }
                    let mut gx = Tensor::zeros(ci, h, wd);
                    for c in 0..ci {
                        for y in 0..h {
                            let src = c * stride + (y + 1) * w2 + 1;
                            gx.data[(c * h + y) * wd..(c * h + y + 1) * wd].copy_from_slice(&gp[src..src + wd]);
                        }
                    }
                    acc(*x, gx);
                }
                let gb = Tensor { c: co, h: 1, w: 1, data: (0..co).map(|o| g.channel(o).iter().sum()).collect() };
                acc(*b, gb);
            }
            Op::Conv1x1 { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (ci, h, wd) = xt.shape();
                let co = wt.c;
                let hw = h * wd;
                if self.needs_grad(*w) {
                    let mut gw = Tensor::zeros(co, ci, 1);
                    gemm(co, hw, ci, 1.0, &g.data, false, &xt.data, true, 0.0, &mut gw.data);
                    acc(*w, gw);
                }
                if self.needs_grad(*x) {
                    let mut gx = Tensor::zeros(ci, h, wd);
                    gemm(ci, co, hw, 1.0, &wt.data, true, &g.data, false, 0.0, &mut gx.data);
                    acc(*x, gx);
                }
                let gb = Tensor { c: co, h: 1, w: 1, data: (0..co).map(|o| g.channel(o).iter().sum()).collect() };
                acc(*b, gb);
            }
            Op::ChannelNorm { x, gamma, beta, xhat, inv_std } => {
                let gt = self.value(*gamma);
                let (c, h, w) = xhat.shape();
                let p = h * w;
                let n = p as f64;
                let mut gx = Tensor::zeros(c, h, w);
                let mut gg = Tensor::zeros(c, 1, 1);
                let mut gbeta = Tensor::zeros(c, 1, 1);
                for ch in 0..c {
                    let dy = g.channel(ch);
                    let xh = xhat.channel(ch);
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for k in 0..p {
                        sum_d += dy[k];
                        sum_dx += dy[k] * xh[k];
                    }
                    gg.data[ch] = sum_dx;
                    gbeta.data[ch] = sum_d;
                    let scale = gt.data[ch] * inv_std[ch] / n;
                    for k in 0..p {
                        gx.data[ch * p + k] = scale * (n * dy[k] - sum_d - xh[k] * sum_dx);
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gbeta);
            }
            Op::Relu { x } => {
                let xt = self.value(*x);
                let data = g.data.iter().zip(&xt.data).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                acc(*x, Tensor { data, ..g.clone() });
            }
            Op::LRelu { x, slope } => {
                let xt = self.value(*x);
                let data = g.data.iter().zip(&xt.data).map(|(g, v)| if *v < 0.0 { g * slope } else { *g }).collect();
                acc(*x, Tensor { data, ..g.clone() });
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let (c, _, _) = y.shape();
                let p = y.plane();
                let mut gx = Tensor::zeros(y.c, y.h, y.w);
                for k in 0..p {
                    if norms[k] == 0.0 {
                        continue;
                    }
                    let dot: f64 = (0..c).map(|ch| y.data[ch * p + k] * g.data[ch * p + k]).sum();
                    for ch in 0..c {
                        gx.data[ch * p + k] = (g.data[ch * p + k] - y.data[ch * p + k] * dot) / norms[k];
                    }
                }
                acc(*x, gx);
            }
            Op::Concat { xs } => {
                let p = g.plane();
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).c;
                    let data = g.data[offset * p..(offset + c) * p].to_vec();
                    acc(v, Tensor { c, h: g.h, w: g.w, data });
                    offset += c;
                }
            }
            Op::Hadamard { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let p = g.plane();
                let mut ga = Tensor::zeros(at.c, at.h, at.w);
                let mut gb = Tensor::zeros(bt.c, bt.h, bt.w);
                for ch in 0..g.c {
                    let ca = if at.c == 1 { 0 } else { ch };
                    let cb = if bt.c == 1 { 0 } else { ch };
                    for k in 0..p {
                        let gv = g.data[ch * p + k];
                        ga.data[ca * p + k] += gv * bt.data[cb * p + k];
                        gb.data[cb * p + k] += gv * at.data[ca * p + k];
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::ScalarMul { x, s } => {
                let mut gx = g.clone();
                gx.data.iter_mut().for_each(|v| *v *= s);
                acc(*x, gx);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddConst { x } => acc(*x, g.clone()),
            Op::ChannelDot { x, v } => {
                let p = g.plane();
                let mut gx = Tensor::zeros(v.len(), g.h, g.w);
                for (ch, s) in v.iter().enumerate() {
                    for k in 0..p {
                        gx.data[ch * p + k] = s * g.data[k];
                    }
                }
                acc(*x, gx);
            }
            Op::ChannelSlice { x, start } => {
                let xt = self.value(*x);
                let p = xt.plane();
                let mut gx = Tensor::zeros(xt.c, xt.h, xt.w);
                gx.data[start * p..start * p + g.data.len()].copy_from_slice(&g.data);
                acc(*x, gx);
            }
            Op::MaskedMeanAbs { x, mask, count } => {
                let xt = self.value(*x);
                let p = xt.plane();
                let scale = g.item() / (*count * xt.c) as f64;
                let data = xt
                    .data
                    .iter()
                    .enumerate()
                    .map(|(k, v)| if mask[k % p] { scale * sign(*v) } else { 0.0 })
                    .collect();
                acc(*x, Tensor { data, ..xt.clone() });
            }
            Op::MaskedMeanSq { x, mask, count } => {
                let xt = self.value(*x);
                let p = xt.plane();
                let scale = 2.0 * g.item() / *count as f64;
                let data = xt.data.iter().enumerate().map(|(k, v)| if mask[k % p] { scale * v } else { 0.0 }).collect();
                acc(*x, Tensor { data, ..xt.clone() });
            }
            Op::Sum { x } => {
                let xt = self.value(*x);
                acc(*x, Tensor::filled(xt.c, xt.h, xt.w, g.item()));
            }
            Op::Linear { x, op } => acc(*x, op.apply_transpose(g)?),
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Largest relative difference between an analytic gradient and central
/// finite differences of `f` at `x`.
///
/// `f` returns the scalar value and its analytic gradient with respect to
/// its argument. The relative error of each coordinate uses the
/// denominator `max(|analytic|, |numeric|, 1e-6)`; coordinates whose
/// gradient is zero are judged by absolute error.
pub fn gradcheck(f: impl Fn(&Tensor) -> Result<(f64, Tensor)>, x: &Tensor, step: f64) -> Result<f64> {
    let (_, analytic) = f(x)?;
    if !analytic.same_shape(x) {
        return Err(Error::primitive("gradcheck", "gradient shape differs from input"));
    }
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + step;
        let (up, _) = f(&probe)?;
        probe.data[k] = orig - step;
        let (down, _) = f(&probe)?;
        probe.data[k] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data[k];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.c, t.h, t.w);
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// One update of every parameter; `lrs[i]` is the learning rate of
    /// parameter `i`.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::ShapeMismatch("adam: parameter, gradient and rate counts differ".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if !g.same_shape(p) {
                return Err(Error::ShapeMismatch(format!("adam: gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= lrs[i] * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Gradient of `sum(weights * f(x))` with respect to `x`.
    fn check(build: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> f64 {
        let probe = |t: &Tensor| -> Result<(f64, Tensor)> {
            let mut tape = Tape::new();
            let xv = tape.leaf(t.clone());
            let y = build(&mut tape, xv)?;
            let out = tape.value(y).clone();
            let weights = Tensor::randn(out.c, out.h, out.w, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
            let wv = tape.leaf(weights);
            let prod = tape.hadamard(y, wv)?;
            let loss = tape.sum(prod);
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), g.get_or_zeros(xv, t)))
        };
        gradcheck(probe, x, 1e-5).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let x = Tensor::randn(2, 5, 4, 1.0, &mut rng());
        let mut w = Tensor::zeros(2, 2, 9);
        w.data[4] = 1.0; // out 0 <- in 0 center tap
        w.data[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 center tap
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w), tape.leaf(Tensor::zeros(2, 1, 1)));
        let y = tape.conv3x3(xv, wv, bv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let mut r = rng();
        let x = Tensor::randn(3, 5, 7, 1.0, &mut r);
        let w = Tensor::randn(2, 3, 9, 1.0, &mut r);
        let b = Tensor::randn(2, 1, 1, 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv3x3(xv, wv, bv).unwrap();
        let out = tape.value(y);
        for o in 0..2 {
            for yy in 0..5 {
                for xx in 0..7 {
                    let mut s = b.data[o];
                    for i in 0..3 {
                        for t in 0..9 {
                            let (sy, sx) = (yy as isize + (t / 3) as isize - 1, xx as isize + (t % 3) as isize - 1);
                            if (0..5).contains(&sy) && (0..7).contains(&sx) {
                                s += w.data[(o * 3 + i) * 9 + t] * x.at(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    assert!((out.at(o, yy, xx) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_norm_after_l2_normalize() {
        let x = Tensor::randn(3, 4, 4, 1.0, &mut rng());
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = tape.l2_normalize_channels(xv);
        let t = tape.value(y);
        for k in 0..16 {
            let n: f64 = (0..3).map(|c| t.data[c * 16 + k].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_norm_standardizes() {
        let x = Tensor::randn(3, 6, 5, 2.0, &mut rng());
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let g = tape.leaf(Tensor::filled(3, 1, 1, 1.0));
        let b = tape.leaf(Tensor::zeros(3, 1, 1));
        let y = tape.channel_norm(xv, g, b, 0.0).unwrap();
        let t = tape.value(y);
        for c in 0..3 {
            let ch = t.channel(c);
            let mean = ch.iter().sum::<f64>() / 30.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn simple_gradients() {
        let x = Tensor::randn(2, 3, 3, 1.0, &mut rng());
        let y = Tensor::randn(2, 3, 3, 1.0, &mut rng());
        let mut tape = Tape::new();
        let (xv, yv) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
        let s = tape.sum(xv);
        let g = tape.backward(s).unwrap();
        assert!(g.get(xv).unwrap().data.iter().all(|v| *v == 1.0));
        let p = tape.hadamard(xv, yv).unwrap();
        let l = tape.sum(p);
        let g1 = tape.backward(l).unwrap();
        assert_eq!(g1.get(xv).unwrap(), &y);
        // Repeatable and linear in the seed.
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.get(xv), g2.get(xv));
        let g3 = tape.backward_with_seed(l, 2.0).unwrap();
        let doubled: Vec<f64> = y.data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g3.get(xv).unwrap().data, doubled);
        assert!(matches!(tape.backward(Var(1000)), Err(Error::LossNotOnTape)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(1, 2, 2, 2.0));
        let k = tape.constant(Tensor::filled(1, 2, 2, 3.0));
        let p = tape.hadamard(x, k).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!(g.get(k).is_none());
        assert!(g.get(x).unwrap().data().iter().all(|v| *v == 3.0));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3, 3));
        let b = tape.leaf(Tensor::zeros(2, 4, 3));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().starts_with("add:"));
        let w = tape.leaf(Tensor::zeros(4, 3, 9));
        let bias = tape.leaf(Tensor::zeros(4, 1, 1));
        assert!(tape.conv3x3(a, w, bias).unwrap_err().to_string().starts_with("conv2d_3x3"));
    }

    #[test]
    fn linear_and_relu_gradchecks() {
        let x = Tensor::randn(2, 4, 4, 1.0, &mut rng());
        assert!(check(|t, x| Ok(t.scalar_mul(x, 3.0)), &x) < 1e-10);
        // Keep inputs away from the kink.
        let mut xr = x.clone();
        xr.data.iter_mut().for_each(|v| *v += 0.2 * sign(*v));
        assert!(check(|t, x| Ok(t.relu(x)), &xr) < 1e-6);
        assert!(check(|t, x| Ok(t.lrelu(x, 0.1)), &xr) < 1e-6);
    }

    #[test]
    fn every_primitive_passes_gradcheck() {
        let mut r = rng();
        let x = Tensor::randn(3, 5, 6, 1.0, &mut r);
        let w3 = Tensor::randn(4, 3, 9, 0.5, &mut r);
        let w1 = Tensor::randn(4, 3, 1, 0.5, &mut r);
        let bias = Tensor::randn(4, 1, 1, 0.5, &mut r);
        let other = Tensor::randn(3, 5, 6, 1.0, &mut r);
        let gamma = Tensor::randn(3, 1, 1, 1.0, &mut r);
        let mask: Rc<Vec<bool>> = Rc::new((0..30).map(|k| k % 3 != 0).collect());
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            ("conv3x3", Box::new(|t, x| {
                let (w, b) = (t.leaf(w3.clone()), t.leaf(bias.clone()));
                t.conv3x3(x, w, b)
            })),
            ("conv1x1", Box::new(|t, x| {
                let (w, b) = (t.leaf(w1.clone()), t.leaf(bias.clone()));
                t.conv1x1(x, w, b)
            })),
            ("channel_norm", Box::new(|t, x| {
                let (g, b) = (t.leaf(gamma.clone()), t.leaf(Tensor::filled(3, 1, 1, 0.3)));
                t.channel_norm(x, g, b, 1e-5)
            })),
            ("l2_normalize", Box::new(|t, x| Ok(t.l2_normalize_channels(x)))),
            ("concat", Box::new(|t, x| {
                let o = t.leaf(other.clone());
                t.concat_channels(&[o, x, x])
            })),
            ("hadamard", Box::new(|t, x| t.hadamard(x, x))),
            ("hadamard_broadcast", Box::new(|t, x| {
                let s = t.channel_slice(x, 1, 1)?;
                t.hadamard(x, s)
            })),
            ("add", Box::new(|t, x| {
                let o = t.leaf(other.clone());
                t.add(x, o)
            })),
            ("add_const", Box::new(|t, x| t.add_const(x, &other))),
            ("channel_dot", Box::new(|t, x| t.channel_dot(x, &[0.3, -0.5, 0.8]))),
            ("masked_mean_abs", Box::new(|t, x| t.masked_mean_abs(x, mask.clone()))),
            ("masked_mean_sq", Box::new(|t, x| t.masked_mean_sq(x, mask.clone()))),
        ];
        for (name, f) in cases {
            let err = check(f, &x);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn weight_gradients_of_convolutions() {
        let mut r = rng();
        let x = Tensor::randn(2, 4, 5, 1.0, &mut r);
        let w = Tensor::randn(3, 2, 9, 0.5, &mut r);
        let f = |wt: &Tensor| -> Result<(f64, Tensor)> {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(Tensor::filled(3, 1, 1, 0.1)));
            let y = tape.conv3x3(xv, wv, bv)?;
            let sq = tape.hadamard(y, y)?;
            let l = tape.sum(sq);
            let g = tape.backward(l)?;
            Ok((tape.value(l).item(), g.get_or_zeros(wv, wt)))
        };
        assert!(gradcheck(f, &w, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut params = vec![Tensor::filled(1, 2, 2, 0.5)];
        let mut adam = Adam::new(&params);
        adam.update(&mut params, &[Tensor::zeros(1, 2, 2)], &[0.01]).unwrap();
        assert!(params[0].data.iter().all(|v| *v == 0.5));

        let mut params = vec![Tensor::filled(1, 2, 2, 0.5)];
        let mut adam = Adam::new(&params);
        adam.update(&mut params, &[Tensor::filled(1, 2, 2, -3.0)], &[0.01]).unwrap();
        // Bias-corrected moments give |m/sqrt(v)| = 1 at the first step.
        for v in &params[0].data {
            assert!((v - 0.51).abs() < 1e-9);
        }
    }
}
