//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and, when at least one input requires
//! a gradient, appends a record to the tape. [`Tape::backward`] replays the
//! records in exact reverse order of recording and accumulates
//! `∂loss/∂leaf` into each differentiable leaf.

use super::kernels::{self, ConvGeom};
use super::tensor::numel_of;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stabilizer inside the per-channel normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// One factor for the whole tensor, or one per leading-axis slice.
    Scale(Var, Vec<T>),
    Matmul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Silu(Var),
    GroupNormLite {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Softmax(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Upsample2x(Var),
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of every primitive evaluated since construction.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

fn dims_for_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a differentiable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).scale(factor);
        self.push(out, Op::Scale(a, vec![factor]), &[a])
    }

    /// Multiplies slice `i` of the leading axis by `factors[i]`.
    pub fn scale_leading(&mut self, a: Var, factors: &[T]) -> Result<Var> {
        let x = self.value(a);
        let lead = x.shape().first().copied().unwrap_or(1);
        if factors.len() != lead || x.rank() == 0 {
            return Err(Error::shape(
                "scale",
                format!("{} factors for shape {:?}", factors.len(), x.shape()),
            ));
        }
        let chunk = x.numel() / lead.max(1);
        let mut out = x.clone();
        for (block, &f) in out.data_mut().chunks_mut(chunk.max(1)).zip(factors) {
            block.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(out, Op::Scale(a, factors.to_vec()), &[a]))
    }

    /// `(m×k)·(k×n)` or batched `(b×m×k)·(b×k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bv[i * k * n..(i + 1) * k * n],
                n,
                1,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                1,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let r = x.rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let out = transpose_last2(x);
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// `x·W + b` over the last axis; `W` is `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs
            .last()
            .ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if ws.len() != 2 || ws[0] != fan_in {
            return Err(Error::shape("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let fan_out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {fan_out} outputs", self.shape(b)),
                ));
            }
        }
        let rows = numel_of(&xs) / fan_in.max(1);
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            fan_in,
            fan_out,
            T::one(),
            self.value(x).data(),
            fan_in,
            1,
            self.value(w).data(),
            fan_out,
            1,
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            fan_out,
            1,
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = fan_out;
        let out = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, c, h, wd) = match xs {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(Error::shape("conv2d", format!("input {xs:?} is not N×C×H×W"))),
        };
        let (o, kh, kw) = match ws {
            [o, ci, kh, kw] if *ci == c => (*o, *kh, *kw),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight {ws:?} incompatible with input {xs:?}"),
                ))
            }
        };
        let ho = kernels::conv_out_extent(h, kh, stride, pad);
        let wo = kernels::conv_out_extent(wd, kw, stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok((
                n,
                o,
                ConvGeom {
                    c,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    ho,
                    wo,
                },
            )),
            _ => Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} stride {stride} pad {pad} does not fit {h}×{wd}"),
            )),
        }
    }

    /// 2-D cross-correlation. `x` is `N×C×H×W`, `w` is `O×C×kh×kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, o, g) = self.conv_geom(x, w, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {o} output channels", self.shape(b)),
                ));
            }
        }
        let (k, p) = (g.rows(), g.cols());
        let mut cols = vec![T::zero(); k * p];
        let mut out = vec![T::zero(); n * o * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let in_chunk = g.c * g.h * g.w;
        for i in 0..n {
            kernels::im2col(&xv[i * in_chunk..(i + 1) * in_chunk], &g, &mut cols);
            let dst = &mut out[i * o * p..(i + 1) * o * p];
            if let Some(b) = b {
                for (row, &bias) in dst.chunks_mut(p).zip(self.value(b).data()) {
                    row.fill(bias);
                }
            }
            T::gemm(
                o,
                k,
                p,
                T::one(),
                wv,
                k,
                1,
                &cols,
                p,
                1,
                if b.is_some() { T::one() } else { T::zero() },
                dst,
                p,
                1,
            );
        }
        let out = Tensor::new(vec![n, o, g.ho, g.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * kernels::sigmoid(v));
        self.push(out, Op::Silu(a), &[a])
    }

    /// Per-(sample, channel) normalization over spatial positions followed
    /// by a learnable per-channel scale and shift.
    pub fn group_norm_lite(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape("group_norm_lite", format!("input {xs:?} has no spatial axes")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "group_norm_lite",
                format!(
                    "scale {:?} / shift {:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let m = numel_of(&xs[2..]);
        let xv = self.value(x).data();
        let stats = kernels::norm_stats(xv, m, T::from_f64_lossy(NORM_EPS));
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for (plane_idx, (src, dst)) in xv.chunks(m).zip(out.chunks_mut(m)).enumerate() {
            let ch = plane_idx % c;
            let (mean, inv) = stats[plane_idx];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * inv * gv[ch] + bv[ch];
            }
        }
        let out = Tensor::new(xs, out)?;
        Ok(self.push(out, Op::GroupNormLite { x, gamma, beta }, &[x, gamma, beta]))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax_lastdim", "scalar input"))?;
        let mut out = vec![T::zero(); x.numel()];
        kernels::softmax_rows(x.data(), n, &mut out);
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = dims_for_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Channel-axis concatenation of `N×C×H×W` tensors.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if self.shape(*v).len() != 4 {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input {:?} is not N×C×H×W", self.shape(*v)),
                ));
            }
        }
        self.concat(inputs, 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::shape("slice", format!("[{start}, {end}) on axis {axis} of {s:?}")));
        }
        let (outer, extent, inner) = dims_for_axis(&s, axis);
        let width = end - start;
        let xv = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&xv[base..base + width * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Slice { x: a, axis, start }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    /// Replaces every position where `mask` is true with `fill`. The result
    /// does not depend on the replaced inputs.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], fill: T) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.numel() {
            return Err(Error::shape(
                "mask_fill",
                format!("mask of {} for shape {:?}", mask.len(), x.shape()),
            ));
        }
        let mut out = x.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *v = fill;
            }
        }
        Ok(self.push(
            out,
            Op::MaskFill {
                x: a,
                mask: mask.to_vec(),
            },
            &[a],
        ))
    }

    /// Adds `bias[n, c]` to every spatial position of channel `c` in sample `n`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if xs.len() < 2 || bs != [xs[0], xs[1]] {
            return Err(Error::shape("add_channel_bias", format!("{xs:?} + {bs:?}")));
        }
        let m = numel_of(&xs[2..]);
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for (plane, &b) in out.data_mut().chunks_mut(m).zip(bv) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    /// Nearest-neighbour 2× spatial upsampling of `N×C×H×W`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [n, c, h, w] = s[..] else {
            return Err(Error::shape("upsample2x", format!("input {s:?} is not N×C×H×W")));
        };
        let xv = self.value(a).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for (plane, dst) in xv.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = plane[(y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(out, Op::Upsample2x(a), &[a]))
    }

    /// Populates `∂loss/∂leaf` for every differentiable leaf. Gradients from
    /// repeated calls accumulate until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; end];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                },
                op => self.propagate(op, &node.value, g, &mut grads)?,
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.leaf_grads[i].is_none() {
                self.leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone())?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, factors) => {
                let mut ga = g;
                if factors.len() == 1 {
                    let f = factors[0];
                    ga.data_mut().iter_mut().for_each(|v| *v *= f);
                } else {
                    let chunk = ga.numel() / factors.len();
                    for (block, &f) in ga.data_mut().chunks_mut(chunk.max(1)).zip(factors) {
                        block.iter_mut().for_each(|v| *v *= f);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = av.shape();
                let (batch, m, k) = if sa.len() == 2 {
                    (1, sa[0], sa[1])
                } else {
                    (sa[0], sa[1], sa[2])
                };
                let n = *bv.shape().last().unwrap();
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // dA = dC · Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g.data()[i * m * n..(i + 1) * m * n],
                            n,
                            1,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            1,
                            n,
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            k,
                            1,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), ga)?)?;
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        // dB = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av.data()[i * m * k..(i + 1) * m * k],
                            1,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            n,
                            1,
                            T::zero(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            n,
                            1,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?)?;
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, transpose_last2(&g))?;
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / fan_in.max(1);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); rows * fan_in];
                    T::gemm(
                        rows,
                        fan_out,
                        fan_in,
                        T::one(),
                        g.data(),
                        fan_out,
                        1,
                        wv.data(),
                        1,
                        fan_out,
                        T::zero(),
                        &mut gx,
                        fan_in,
                        1,
                    );
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); fan_in * fan_out];
                    T::gemm(
                        fan_in,
                        rows,
                        fan_out,
                        T::one(),
                        xv.data(),
                        1,
                        fan_in,
                        g.data(),
                        fan_out,
                        1,
                        T::zero(),
                        &mut gw,
                        fan_out,
                        1,
                    );
                    self.accumulate(grads, *w, Tensor::new(vec![fan_in, fan_out], gw)?)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); fan_out];
                        for row in g.data().chunks(fan_out) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![fan_out], gb)?)?;
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, o, geom) = self.conv_geom(*x, *w, *stride, *pad)?;
                let (k, p) = (geom.rows(), geom.cols());
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let in_chunk = geom.c * geom.h * geom.w;
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x { vec![T::zero(); n * in_chunk] } else { Vec::new() };
                let mut gw = if want_w { vec![T::zero(); o * k] } else { Vec::new() };
                let mut cols = vec![T::zero(); k * p];
                let mut gcols = vec![T::zero(); k * p];
                for i in 0..n {
                    let go = &g.data()[i * o * p..(i + 1) * o * p];
                    if want_w {
                        kernels::im2col(&xv[i * in_chunk..(i + 1) * in_chunk], &geom, &mut cols);
                        // dW += dOut · colsᵀ
                        T::gemm(o, p, k, T::one(), go, p, 1, &cols, 1, p, T::one(), &mut gw, k, 1);
                    }
                    if want_x {
                        // dcols = Wᵀ · dOut
                        T::gemm(k, o, p, T::one(), wv, 1, k, go, p, 1, T::zero(), &mut gcols, p, 1);
                        kernels::col2im_add(&gcols, &geom, &mut gx[i * in_chunk..(i + 1) * in_chunk]);
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?)?;
                }
                if want_w {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), gw)?)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); o];
                        for (idx, plane) in g.data().chunks(p).enumerate() {
                            gb[idx % o] += plane.iter().copied().sum::<T>();
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![o], gb)?)?;
                    }
                }
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let ga = g.zip_map(xv, "silu", |gv, x| {
                    let s = kernels::sigmoid(x);
                    gv * s * (T::one() + x * (T::one() - s))
                })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::GroupNormLite { x, gamma, beta } => {
                let xt = self.value(*x);
                let xs = xt.shape();
                let c = xs[1];
                let m = numel_of(&xs[2..]);
                let mf = T::from_usize(m).unwrap();
                let stats = kernels::norm_stats(xt.data(), m, T::from_f64_lossy(NORM_EPS));
                let gam = self.value(*gamma).data();
                let mut gx = vec![T::zero(); xt.numel()];
                let mut ggam = vec![T::zero(); c];
                let mut gbet = vec![T::zero(); c];
                for (plane_idx, ((src, gsrc), dst)) in xt
                    .data()
                    .chunks(m)
                    .zip(g.data().chunks(m))
                    .zip(gx.chunks_mut(m))
                    .enumerate()
                {
                    let ch = plane_idx % c;
                    let (mean, inv) = stats[plane_idx];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for (&v, &gv) in src.iter().zip(gsrc) {
                        let xhat = (v - mean) * inv;
                        ggam[ch] += gv * xhat;
                        gbet[ch] += gv;
                        let dxhat = gv * gam[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for ((d, &v), &gv) in dst.iter_mut().zip(src).zip(gsrc) {
                        let xhat = (v - mean) * inv;
                        let dxhat = gv * gam[ch];
                        *d = inv / mf * (mf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs.to_vec(), gx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![c], ggam)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], gbet)?)?;
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap();
                let mut ga = vec![T::zero(); out.numel()];
                for ((y, gy), dst) in out
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(ga.chunks_mut(n))
                {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gy) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), ga)?)?;
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = dims_for_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let s = self.shape(*v);
                    let width = s[*axis];
                    if self.wants(*v) {
                        let mut gv = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g.data()[base..base + width * inner]);
                        }
                        self.accumulate(grads, *v, Tensor::new(s.to_vec(), gv)?)?;
                    }
                    offset += width;
                }
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshape(&shape)?)?;
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let (outer, extent, inner) = dims_for_axis(&s, *axis);
                let width = out.shape()[*axis];
                let mut gx = vec![T::zero(); numel_of(&s)];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    gx[base..base + width * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(s, gx)?)?;
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv))?;
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel().max(1)).unwrap();
                let gv = g.data()[0] / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv))?;
            }
            Op::MaskFill { x, mask } => {
                let mut gx = g;
                for (v, &m) in gx.data_mut().iter_mut().zip(mask) {
                    if m {
                        *v = T::zero();
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::AddChannelBias { x, bias } => {
                if self.wants(*bias) {
                    let bs = self.shape(*bias).to_vec();
                    let m = g.numel() / numel_of(&bs).max(1);
                    let gb: Vec<T> = g.data().chunks(m).map(|p| p.iter().copied().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::new(bs, gb)?)?;
                }
                self.accumulate(grads, *x, g)?;
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a).to_vec();
                let (h, w) = (s[2], s[3]);
                let mut ga = vec![T::zero(); numel_of(&s)];
                for (src, dst) in g.data().chunks(4 * h * w).zip(ga.chunks_mut(h * w)) {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(s, ga)?)?;
            }
        }
        Ok(())
    }
}

fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch = numel_of(&s[..r - 2]);
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).expect("transpose preserves element count")
}
