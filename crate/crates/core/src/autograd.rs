//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter as
//! borrowed leaves so a forward pass never copies weights. Frozen parameters and
//! plain inputs do not require gradients; operations whose inputs do not require
//! gradients are skipped entirely during [`Graph::backward`].

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, Upsample};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Option<Vec<T>> },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    ChannelAffine { x: Var, scale: Vec<T> },
    AdaptivePool(Var),
    Resize(Var, Upsample),
    MaxPool { x: Var, argmax: Vec<usize> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxRows(Var),
    Reshape(Var),
    ForegroundProb(Var),
    WeightedBce { p: Var, target: Vec<T>, weights: Vec<T>, eps: T },
    Dot { x: Var, w: Vec<T> },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: BTreeMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    leaves: BTreeMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    /// Gradients of every trainable parameter used in the pass, in id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|&(id, v)| self.leaves.get(&v).map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.leaves.get(v))
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: true }
    }

    /// A graph that never records gradient state.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    /// Leaf for a stored parameter; repeated calls return the same leaf.
    pub fn param(&mut self, store: &'p ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            op: Op::Param,
            requires_grad: p.trainable && self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let wshape = self.value(w).shape();
        if wshape.len() != 4 || wshape[1] != c || wshape[2] != geom.kernel || wshape[3] != geom.kernel {
            return Err(Error::shape(format!(
                "conv weight {wshape:?} incompatible with input {c}×{h}×{wd} and kernel {}",
                geom.kernel
            )));
        }
        let out_ch = wshape[0];
        if let Some(b) = b {
            if self.value(b).shape() != [out_ch] {
                return Err(Error::shape(format!("conv bias {:?} for {out_ch} outputs", self.value(b).shape())));
            }
        }
        if geom.out_size(h).is_none() || geom.out_size(wd).is_none() {
            return Err(Error::shape(format!("input {h}×{wd} smaller than kernel span")));
        }
        let bias = b.map(|b| self.value(b).data());
        let (y, (oh, ow), cols) = ops::conv2d_forward(self.value(x).data(), (c, h, wd), self.value(w).data(), out_ch, bias, geom);
        let requires = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let cols = if self.requires_grad(w) { cols } else { None };
        let y = Tensor::from_vec(&[out_ch, oh, ow], y)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, geom, cols }, requires))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let r = self.rg(&[x]);
        self.push(y, Op::Relu(x), r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let r = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), r))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        let r = self.rg(&[x]);
        self.push(y, Op::Scale(x, s), r)
    }

    /// Channel concatenation of rank-3 tensors sharing a spatial grid.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(parts[0]).dims3()?;
        let mut total = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!("concat grids {h}×{w} vs {ph}×{pw}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(total * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let r = self.rg(parts);
        Ok(self.push(Tensor::from_vec(&[total, h, w], data)?, Op::Concat(parts.to_vec()), r))
    }

    /// `y[c] = x[c] · scale[c] + shift[c]`, with constant (non-learned) coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: &[T]) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape(format!("affine of {c} channels with {} coefficients", scale.len())));
        }
        let mut y = self.value(x).clone();
        for (ci, chunk) in y.data_mut().chunks_mut(h * w).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * scale[ci] + shift[ci]);
        }
        let r = self.rg(&[x]);
        Ok(self.push(y, Op::ChannelAffine { x, scale }, r))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        if dims.1 < oh || dims.2 < ow || oh == 0 || ow == 0 {
            return Err(Error::shape(format!("cannot pool {}×{} to {oh}×{ow}", dims.1, dims.2)));
        }
        let y = ops::adaptive_avg_pool(self.value(x).data(), dims, oh, ow);
        let r = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[dims.0, oh, ow], y)?, Op::AdaptivePool(x), r))
    }

    pub fn resize(&mut self, x: Var, oh: usize, ow: usize, mode: Upsample) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("resize to an empty grid"));
        }
        let y = ops::resize(self.value(x).data(), dims, oh, ow, mode);
        let r = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[dims.0, oh, ow], y)?, Op::Resize(x, mode), r))
    }

    pub fn max_pool(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        if geom.out_size(dims.1).is_none() || geom.out_size(dims.2).is_none() {
            return Err(Error::shape("max pool input smaller than window"));
        }
        let (y, argmax, (oh, ow)) = ops::max_pool(self.value(x).data(), dims, geom);
        let r = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[dims.0, oh, ow], y)?, Op::MaxPool { x, argmax }, r))
    }

    /// `op(a) · op(b)` of rank-2 tensors, where `op` optionally transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!("matmul needs matrices, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut y = vec![T::zero(); m * n];
        gemm(m, n, k, self.value(a).data(), ta, self.value(b).data(), tb, &mut y, T::zero());
        let r = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&[m, n], y)?, Op::MatMul { a, b, ta, tb }, r))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("softmax_rows needs a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let y = ops::softmax_rows(self.value(x).data(), rows, cols);
        let r = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[rows, cols], y)?, Op::SoftmaxRows(x), r))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let r = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), r))
    }

    /// Foreground probability of two-channel (background, foreground) logits:
    /// the second channel of a per-pixel softmax.
    pub fn foreground_prob(&mut self, logits: Var) -> Result<Var> {
        let (c, h, w) = self.value(logits).dims3()?;
        if c != 2 {
            return Err(Error::shape(format!("foreground_prob needs 2 channels, got {c}")));
        }
        let d = self.value(logits).data();
        let n = h * w;
        let p: Vec<T> = (0..n).map(|i| T::one() / (T::one() + (d[i] - d[n + i]).exp())).collect();
        let r = self.rg(&[logits]);
        Ok(self.push(Tensor::from_vec(&[1, h, w], p)?, Op::ForegroundProb(logits), r))
    }

    /// Mean over pixels of `weight · BCE(p, target)`, with `p` clamped to `[eps, 1-eps]`.
    pub fn weighted_bce(&mut self, p: Var, target: Vec<T>, weights: Vec<T>, eps: T) -> Result<Var> {
        let n = self.value(p).len();
        if target.len() != n || weights.len() != n {
            return Err(Error::shape(format!("bce over {n} pixels with {} targets", target.len())));
        }
        let pv = self.value(p).data();
        let mut total = T::zero();
        for i in 0..n {
            let q = pv[i].max(eps).min(T::one() - eps);
            let y = target[i];
            total = total - weights[i] * (y * q.ln() + (T::one() - y) * (T::one() - q).ln());
        }
        let loss = total / T::lit(n as f64);
        let r = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedBce { p, target, weights, eps }, r))
    }

    /// `Σ x ⊙ w` for a constant `w`; used to project a tensor onto a scalar.
    pub fn dot(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return Err(Error::shape("dot weight length"));
        }
        let s = self.value(x).data().iter().zip(&w).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let r = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, w }, r))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        let mut leaves = BTreeMap::new();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param => {
                    leaves.insert(Var(i), Tensor::from_vec(node.value.shape(), dy)?);
                }
                op => self.backward_op(op, &node.value, dy, &mut grads),
            }
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { leaves, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_op(&self, op: &Op<T>, y: &Tensor<T>, dy: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let add_into = |dst: &mut [T], src: &[T]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        };
        match op {
            Op::Input | Op::Param => unreachable!(),
            Op::Conv2d { x, w, b, geom, cols } => {
                let xv = self.value(*x);
                let (c, h, wd) = xv.dims3().expect("checked in forward");
                let wv = self.value(*w);
                let out_ch = wv.shape()[0];
                let plane = y.shape()[1] * y.shape()[2];
                let ckk = c * geom.kernel * geom.kernel;
                if self.requires_grad(*w) {
                    let unfolded = cols.as_deref().unwrap_or(xv.data());
                    self.accumulate(grads, *w, |g| gemm(out_ch, ckk, plane, &dy, false, unfolded, true, g, T::one()));
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, |g| {
                        for (o, go) in g.iter_mut().enumerate() {
                            *go = dy[o * plane..(o + 1) * plane].iter().fold(*go, |acc, &v| acc + v);
                        }
                    });
                }
                if self.requires_grad(*x) {
                    if geom.is_pointwise() {
                        self.accumulate(grads, *x, |g| gemm(ckk, plane, out_ch, wv.data(), true, &dy, false, g, T::one()));
                    } else {
                        let mut dcols = vec![T::zero(); ckk * plane];
                        gemm(ckk, plane, out_ch, wv.data(), true, &dy, false, &mut dcols, T::zero());
                        self.accumulate(grads, *x, |g| ops::col2im_add(&dcols, c, h, wd, *geom, g));
                    }
                }
            }
            Op::Relu(x) => self.accumulate(grads, *x, |g| {
                for ((d, &yv), &gv) in g.iter_mut().zip(y.data()).zip(&dy) {
                    if yv > T::zero() {
                        *d = *d + gv;
                    }
                }
            }),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, &dy));
                self.accumulate(grads, *b, |g| add_into(g, &dy));
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, |g| {
                for (d, &gv) in g.iter_mut().zip(&dy) {
                    *d = *d + gv * *s;
                }
            }),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |g| add_into(g, &dy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ChannelAffine { x, scale } => {
                let (_, h, w) = y.dims3().expect("rank 3");
                self.accumulate(grads, *x, |g| {
                    for (i, (d, &gv)) in g.iter_mut().zip(&dy).enumerate() {
                        *d = *d + gv * scale[i / (h * w)];
                    }
                });
            }
            Op::AdaptivePool(x) => {
                let dims = self.value(*x).dims3().expect("rank 3");
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                self.accumulate(grads, *x, |g| ops::adaptive_avg_pool_backward(&dy, dims, oh, ow, g));
            }
            Op::Resize(x, mode) => {
                let dims = self.value(*x).dims3().expect("rank 3");
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                self.accumulate(grads, *x, |g| ops::resize_backward(&dy, dims, oh, ow, *mode, g));
            }
            Op::MaxPool { x, argmax } => self.accumulate(grads, *x, |g| {
                for (&i, &gv) in argmax.iter().zip(&dy) {
                    g[i] = g[i] + gv;
                }
            }),
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                self.accumulate(grads, *a, |g| {
                    if *ta {
                        gemm(k, m, n, bv.data(), *tb, &dy, true, g, T::one());
                    } else {
                        gemm(m, k, n, &dy, false, bv.data(), !*tb, g, T::one());
                    }
                });
                self.accumulate(grads, *b, |g| {
                    if *tb {
                        gemm(n, k, m, &dy, true, av.data(), *ta, g, T::one());
                    } else {
                        gemm(k, n, m, av.data(), !*ta, &dy, false, g, T::one());
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = (y.shape()[0], y.shape()[1]);
                self.accumulate(grads, *x, |g| ops::softmax_rows_backward(y.data(), &dy, rows, cols, g));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |g| add_into(g, &dy)),
            Op::ForegroundProb(x) => {
                let n = y.len();
                self.accumulate(grads, *x, |g| {
                    for i in 0..n {
                        let p = y.data()[i];
                        let d = dy[i] * p * (T::one() - p);
                        g[i] = g[i] - d;
                        g[n + i] = g[n + i] + d;
                    }
                });
            }
            Op::WeightedBce { p, target, weights, eps } => {
                let pv = self.value(*p).data();
                let scale = dy[0] / T::lit(pv.len() as f64);
                self.accumulate(grads, *p, |g| {
                    for i in 0..pv.len() {
                        let q = pv[i].max(*eps).min(T::one() - *eps);
                        let t = target[i];
                        let d = -t / q + (T::one() - t) / (T::one() - q);
                        g[i] = g[i] + scale * weights[i] * d;
                    }
                });
            }
            Op::Dot { x, w } => self.accumulate(grads, *x, |g| {
                for (d, &wv) in g.iter_mut().zip(w) {
                    *d = *d + dy[0] * wv;
                }
            }),
        }
    }
}
