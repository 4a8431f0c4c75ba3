//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as a node; nodes are appended in
//! topological order, so [`Tensor::backward`] walks them in reverse index
//! order and visits each node once. A graph is single-threaded; build one
//! per forward pass and drop it afterwards.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, broadcast_shape, for_each_broadcast, strides};
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    LeakyRelu(f64),
    Hardtanh(f64, f64),
    Square,
    /// `min(1, sqrt(cap / x))` for a squared norm `x`.
    CapFactor(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Broadcast(usize),
    Concat(Vec<usize>, usize),
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    SumAxis(usize, usize),
    Softmax(usize),
    Normalize {
        a: usize,
        rstd: Vec<f64>,
        group: Grouping,
    },
    Conv1d {
        x: usize,
        w: usize,
    },
    DwConv1d {
        x: usize,
        w: usize,
    },
    MaxPool {
        a: usize,
        argmax: Vec<usize>,
    },
}

/// Which elements share normalization statistics.
#[derive(Clone, Copy, Debug)]
enum Grouping {
    /// Each contiguous run along the last axis (layer norm).
    LastAxis,
    /// Each channel of a `[.., C, T]` tensor across all leading dims and
    /// `T` (batch norm).
    Channel,
}

struct Node {
    value: Arc<Vec<f64>>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Vec<f64>>>,
    param_cache: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidShape {
        op,
        reason: reason.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Tensor<'_> {
        self.push_arc(Arc::new(value), shape, op, requires_grad)
    }

    fn push_arc(
        &self,
        value: Arc<Vec<f64>>,
        shape: Vec<usize>,
        op: Op,
        requires_grad: bool,
    ) -> Tensor<'_> {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
            param: None,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that does not take gradients.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        if data.len() != numel(shape) {
            return Err(invalid(
                "constant",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    /// A differentiable leaf.
    pub fn variable(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        if data.len() != numel(shape) {
            return Err(invalid(
                "variable",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, true))
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.push(vec![v], vec![], Op::Leaf, false)
    }

    /// Bind a stored parameter as a leaf. Repeated calls with the same id
    /// return the same node. Frozen parameters and buffers are bound
    /// without gradient tracking.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor<'_> {
        if let Some(&node) = self.param_cache.borrow().get(&id) {
            return Tensor {
                graph: self,
                id: node,
            };
        }
        let p = store.get(id);
        let t = self.push_arc(p.data.clone(), p.shape.clone(), Op::Leaf, p.trainable());
        self.nodes.borrow_mut()[t.id].param = Some(id);
        self.param_cache.borrow_mut().insert(id, t.id);
        t
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Accumulated gradients of every bound, trainable parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let grads = self.leaf_grads.borrow();
        let mut out: Vec<(ParamId, Vec<f64>)> = grads
            .iter()
            .filter_map(|(&i, g)| nodes[i].param.map(|p| (p, g.clone())))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    fn value_of(&self, id: usize) -> Arc<Vec<f64>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

impl<'g> Tensor<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    pub fn value(&self) -> Arc<Vec<f64>> {
        self.graph.value_of(self.id)
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        v[0]
    }

    /// Accumulated gradient of a leaf (zeros when none has reached it).
    pub fn grad(&self) -> Vec<f64> {
        self.graph
            .leaf_grads
            .borrow()
            .get(&self.id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    /// Same values, no gradient flow.
    pub fn detach(&self) -> Tensor<'g> {
        let v = self.value();
        self.graph.push_arc(v, self.shape(), Op::Leaf, false)
    }

    // ----- elementwise ------------------------------------------------------

    fn unary(&self, kind: Unary) -> Tensor<'g> {
        let x = self.value();
        let y: Vec<f64> = match kind {
            Unary::Neg => x.iter().map(|v| -v).collect(),
            Unary::Exp => x.iter().map(|v| v.exp()).collect(),
            Unary::Log => x.iter().map(|v| v.ln()).collect(),
            Unary::Sin => x.iter().map(|v| v.sin()).collect(),
            Unary::Cos => x.iter().map(|v| v.cos()).collect(),
            Unary::Sqrt => x.iter().map(|v| v.sqrt()).collect(),
            Unary::Tanh => x.iter().map(|v| v.tanh()).collect(),
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Unary::Gelu => x.iter().map(|&v| v * kernels::norm_cdf(v)).collect(),
            Unary::LeakyRelu(s) => x.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect(),
            Unary::Hardtanh(lo, hi) => x.iter().map(|&v| v.clamp(lo, hi)).collect(),
            Unary::Square => x.iter().map(|v| v * v).collect(),
            Unary::CapFactor(cap) => x.iter().map(|&v| cap_factor(v, cap)).collect(),
        };
        self.graph.push(
            y,
            self.shape(),
            Op::Unary(kind, self.id),
            self.requires_grad(),
        )
    }

    pub fn neg(&self) -> Tensor<'g> {
        self.unary(Unary::Neg)
    }
    pub fn exp(&self) -> Tensor<'g> {
        self.unary(Unary::Exp)
    }
    pub fn sin(&self) -> Tensor<'g> {
        self.unary(Unary::Sin)
    }
    pub fn cos(&self) -> Tensor<'g> {
        self.unary(Unary::Cos)
    }
    pub fn tanh(&self) -> Tensor<'g> {
        self.unary(Unary::Tanh)
    }
    pub fn sigmoid(&self) -> Tensor<'g> {
        self.unary(Unary::Sigmoid)
    }
    pub fn relu(&self) -> Tensor<'g> {
        self.unary(Unary::Relu)
    }
    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Tensor<'g> {
        self.unary(Unary::Gelu)
    }
    pub fn leaky_relu(&self, slope: f64) -> Tensor<'g> {
        self.unary(Unary::LeakyRelu(slope))
    }
    pub fn hardtanh(&self, lo: f64, hi: f64) -> Tensor<'g> {
        self.unary(Unary::Hardtanh(lo, hi))
    }
    pub fn square(&self) -> Tensor<'g> {
        self.unary(Unary::Square)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self) -> Result<Tensor<'g>> {
        if let Some(&v) = self.value().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(AutodiffError::Domain {
                op: "log",
                value: v,
            });
        }
        Ok(self.unary(Unary::Log))
    }

    /// Square root; every input must be strictly positive.
    pub fn sqrt(&self) -> Result<Tensor<'g>> {
        if let Some(&v) = self.value().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                value: v,
            });
        }
        Ok(self.unary(Unary::Sqrt))
    }

    /// Maps a squared norm `x ≥ 0` to the rescale factor `min(1, sqrt(cap/x))`
    /// that projects a vector onto the ball of squared radius `cap`.
    pub fn cap_factor(&self, cap: f64) -> Tensor<'g> {
        self.unary(Unary::CapFactor(cap))
    }

    pub fn scale(&self, c: f64) -> Tensor<'g> {
        let y = self.value().iter().map(|v| v * c).collect();
        self.graph
            .push(y, self.shape(), Op::Scale(self.id, c), self.requires_grad())
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'g> {
        let y = self.value().iter().map(|v| v + c).collect();
        self.graph.push(
            y,
            self.shape(),
            Op::AddScalar(self.id),
            self.requires_grad(),
        )
    }

    fn binary(&self, kind: Binary, other: Tensor<'g>, name: &'static str) -> Result<Tensor<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| mismatch(name, &sa, &sb))?;
        let (a, b) = (self.value(), other.value());
        let mut y = vec![0.0; numel(&out)];
        let f = |x: f64, z: f64| match kind {
            Binary::Add => x + z,
            Binary::Sub => x - z,
            Binary::Mul => x * z,
            Binary::Div => x / z,
            Binary::Maximum => x.max(z),
        };
        if sa == sb {
            for ((o, &x), &z) in y.iter_mut().zip(a.iter()).zip(b.iter()) {
                *o = f(x, z);
            }
        } else {
            for_each_broadcast(&out, &sa, &sb, |o, ia, ib| y[o] = f(a[ia], b[ib]));
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .graph
            .push(y, out, Op::Binary(kind, self.id, other.id), rg))
    }

    /// Broadcasting elementwise ops (numpy rules).
    pub fn add(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(Binary::Add, other, "add")
    }
    pub fn sub(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(Binary::Sub, other, "sub")
    }
    pub fn mul(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(Binary::Mul, other, "mul")
    }
    pub fn div(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(Binary::Div, other, "div")
    }
    pub fn maximum(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(Binary::Maximum, other, "maximum")
    }

    /// Explicit broadcast to a larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<'g>> {
        let s = self.shape();
        match broadcast_shape(&s, shape) {
            Some(out) if out == shape => {}
            _ => return Err(mismatch("broadcast_to", &s, shape)),
        }
        let a = self.value();
        let mut y = vec![0.0; numel(shape)];
        for_each_broadcast(shape, &s, &[], |o, ia, _| y[o] = a[ia]);
        Ok(self.graph.push(
            y,
            shape.to_vec(),
            Op::Broadcast(self.id),
            self.requires_grad(),
        ))
    }

    // ----- linear algebra ---------------------------------------------------

    /// `[m,k] × [k,n]`.
    pub fn matmul(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut y = vec![0.0; m * n];
        kernels::gemm_nn(&self.value(), &other.value(), &mut y, m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .graph
            .push(y, vec![m, n], Op::MatMul(self.id, other.id), rg))
    }

    /// Batched `[b,m,k] × [b,k,n]`.
    pub fn bmm(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (a, b) = (self.value(), other.value());
        let mut y = vec![0.0; bsz * m * n];
        for (i, c) in y.chunks_mut(m * n).enumerate() {
            kernels::gemm_nn(
                &a[i * m * k..(i + 1) * m * k],
                &b[i * k * n..(i + 1) * k * n],
                c,
                m,
                k,
                n,
            );
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .graph
            .push(y, vec![bsz, m, n], Op::Bmm(self.id, other.id), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor<'g>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(invalid("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<'g>> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len()
            || axes
                .iter()
                .any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(invalid("permute", format!("axes {axes:?} for shape {s:?}")));
        }
        let out: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let y = permute_values(&self.value(), &s, axes);
        Ok(self.graph.push(
            y,
            out,
            Op::Permute(self.id, axes.to_vec()),
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'g>> {
        let s = self.shape();
        if numel(&s) != numel(shape) {
            return Err(mismatch("reshape", &s, shape));
        }
        Ok(self.graph.push_arc(
            self.value(),
            shape.to_vec(),
            Op::Reshape(self.id),
            self.requires_grad(),
        ))
    }

    pub fn concat(parts: &[Tensor<'g>], axis: usize) -> Result<Tensor<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let g = first.graph;
        let s0 = first.shape();
        if axis >= s0.len() {
            return Err(invalid(
                "concat",
                format!("axis {axis} for rank {}", s0.len()),
            ));
        }
        let mut out = s0.clone();
        out[axis] = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(mismatch("concat", &s0, &s));
            }
            out[axis] += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut y = Vec::with_capacity(numel(&out));
        let vals: Vec<_> = parts.iter().map(|p| (p.value(), p.shape()[axis])).collect();
        for o in 0..outer {
            for (v, len) in &vals {
                let chunk = len * inner;
                y.extend_from_slice(&v[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(g.push(
            y,
            out,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            rg,
        ))
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(invalid(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {s:?}"),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value();
        let mut y = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            y.extend_from_slice(&v[base + start * inner..base + end * inner]);
        }
        let mut out = s.clone();
        out[axis] = end - start;
        Ok(self.graph.push(
            y,
            out,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    // ----- reductions -------------------------------------------------------

    pub fn sum(&self) -> Tensor<'g> {
        let y = self.value().iter().sum();
        self.graph
            .push(vec![y], vec![], Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Tensor<'g> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis; the axis is kept with length 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(invalid(
                "sum_axis",
                format!("axis {axis} for rank {}", s.len()),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..s[axis] {
                let src = &v[(o * s[axis] + a) * inner..(o * s[axis] + a + 1) * inner];
                for (d, x) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        let mut out = s.clone();
        out[axis] = 1;
        Ok(self
            .graph
            .push(y, out, Op::SumAxis(self.id, axis), self.requires_grad()))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<'g>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis}")))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Tensor<'g>> {
        self.softmax_impl(false)
    }

    /// Softmax along the last axis of `[.., T, T]` scores with strictly
    /// future keys (column > row) masked out.
    pub fn causal_softmax(&self) -> Result<Tensor<'g>> {
        self.softmax_impl(true)
    }

    fn softmax_impl(&self, causal: bool) -> Result<Tensor<'g>> {
        let s = self.shape();
        let n = *s.last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        if causal && (s.len() < 2 || s[s.len() - 2] != n) {
            return Err(invalid(
                "causal_softmax",
                format!("needs square trailing dims, got {s:?}"),
            ));
        }
        let rows_per_mat = if causal { s[s.len() - 2] } else { 1 };
        let v = self.value();
        let mut y = vec![0.0; v.len()];
        for (r, (src, dst)) in v.chunks(n).zip(y.chunks_mut(n)).enumerate() {
            let valid = if causal { r % rows_per_mat + 1 } else { n };
            let m = src[..valid]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..valid {
                dst[j] = (src[j] - m).exp();
                z += dst[j];
            }
            for d in dst[..valid].iter_mut() {
                *d /= z;
            }
        }
        Ok(self
            .graph
            .push(y, s, Op::Softmax(self.id), self.requires_grad()))
    }

    /// Zero-mean, unit-variance along the last axis (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor<'g>> {
        let s = self.shape();
        let n = *s
            .last()
            .ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        let v = self.value();
        let mut y = vec![0.0; v.len()];
        let mut rstd = Vec::with_capacity(v.len() / n.max(1));
        for (src, dst) in v.chunks(n).zip(y.chunks_mut(n)) {
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (d, x) in dst.iter_mut().zip(src) {
                *d = (x - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.graph.push(
            y,
            s,
            Op::Normalize {
                a: self.id,
                rstd,
                group: Grouping::LastAxis,
            },
            self.requires_grad(),
        ))
    }

    /// Per-channel standardization of a `[.., C, T]` tensor using
    /// statistics over every leading dim and `T`. Returns the normalized
    /// tensor with the biased batch mean and variance per channel.
    pub fn channel_norm(&self, eps: f64) -> Result<(Tensor<'g>, Vec<f64>, Vec<f64>)> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(invalid(
                "channel_norm",
                format!("needs [.., C, T], got {s:?}"),
            ));
        }
        let (c, t) = (s[s.len() - 2], s[s.len() - 1]);
        let v = self.value();
        let outer = v.len() / (c * t).max(1);
        let count = (outer * t) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * t;
                mean[ch] += v[base..base + t].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * t;
                var[ch] += v[base..base + t]
                    .iter()
                    .map(|x| (x - mean[ch]) * (x - mean[ch]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|x| *x /= count);
        let rstd: Vec<f64> = var.iter().map(|x| 1.0 / (x + eps).sqrt()).collect();
        let mut y = vec![0.0; v.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * t;
                for i in base..base + t {
                    y[i] = (v[i] - mean[ch]) * rstd[ch];
                }
            }
        }
        let out = self.graph.push(
            y,
            s,
            Op::Normalize {
                a: self.id,
                rstd,
                group: Grouping::Channel,
            },
            self.requires_grad(),
        );
        Ok((out, mean, var))
    }

    // ----- convolution / pooling -------------------------------------------

    /// Cross-correlation of `[.., C_in, T]` with `w: [C_out, C_in, k]`,
    /// zero padding `(k-1)/2` on both sides so `T` is preserved (`k` odd).
    pub fn conv1d(&self, w: Tensor<'g>) -> Result<Tensor<'g>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() < 2 || sw.len() != 3 || sw[1] != sx[sx.len() - 2] || sw[2] % 2 == 0 {
            return Err(mismatch("conv1d", &sx, &sw));
        }
        let (cin, t) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let (cout, k) = (sw[0], sw[2]);
        let pad = (k - 1) / 2;
        let outer = numel(&sx) / (cin * t).max(1);
        let (xv, wv) = (self.value(), w.value());
        let mut y = vec![0.0; outer * cout * t];
        for n in 0..outer {
            for o in 0..cout {
                let dst = &mut y[(n * cout + o) * t..(n * cout + o + 1) * t];
                for c in 0..cin {
                    let src = &xv[(n * cin + c) * t..(n * cin + c + 1) * t];
                    for j in 0..k {
                        let wj = wv[(o * cin + c) * k + j];
                        conv_tap(dst, src, wj, j as isize - pad as isize);
                    }
                }
            }
        }
        let mut out = sx.clone();
        let r = out.len();
        out[r - 2] = cout;
        let rg = self.requires_grad() || w.requires_grad();
        Ok(self.graph.push(
            y,
            out,
            Op::Conv1d {
                x: self.id,
                w: w.id,
            },
            rg,
        ))
    }

    /// Depthwise cross-correlation of `[.., C, T]` with `w: [C, k]`.
    pub fn dwconv1d(&self, w: Tensor<'g>) -> Result<Tensor<'g>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() < 2 || sw.len() != 2 || sw[0] != sx[sx.len() - 2] || sw[1] % 2 == 0 {
            return Err(mismatch("dwconv1d", &sx, &sw));
        }
        let (c, t) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let k = sw[1];
        let pad = (k - 1) / 2;
        let outer = numel(&sx) / (c * t).max(1);
        let (xv, wv) = (self.value(), w.value());
        let mut y = vec![0.0; xv.len()];
        for n in 0..outer {
            for ch in 0..c {
                let off = (n * c + ch) * t;
                for j in 0..k {
                    conv_tap(
                        &mut y[off..off + t],
                        &xv[off..off + t],
                        wv[ch * k + j],
                        j as isize - pad as isize,
                    );
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad();
        Ok(self.graph.push(
            y,
            sx,
            Op::DwConv1d {
                x: self.id,
                w: w.id,
            },
            rg,
        ))
    }

    /// Non-overlapping max over windows of the last axis; an incomplete
    /// trailing window is dropped.
    pub fn maxpool1d(&self, window: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        let t = *s
            .last()
            .ok_or_else(|| invalid("maxpool1d", "scalar input"))?;
        if window == 0 || t < window {
            return Err(invalid(
                "maxpool1d",
                format!("window {window} longer than {t}"),
            ));
        }
        let tout = t / window;
        let v = self.value();
        let rows = v.len() / t;
        let mut y = Vec::with_capacity(rows * tout);
        let mut argmax = Vec::with_capacity(rows * tout);
        for r in 0..rows {
            for i in 0..tout {
                let base = r * t + i * window;
                let mut best = base;
                for j in base + 1..base + window {
                    if v[j] > v[best] {
                        best = j;
                    }
                }
                y.push(v[best]);
                argmax.push(best);
            }
        }
        let mut out = s.clone();
        *out.last_mut().unwrap() = tout;
        Ok(self.graph.push(
            y,
            out,
            Op::MaxPool { a: self.id, argmax },
            self.requires_grad(),
        ))
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse sweep from this scalar; gradients accumulate into the
    /// graph's leaves (call [`Graph::zero_grad`] to reset).
    pub fn backward(&self) -> Result<()> {
        let g = self.graph;
        let nodes = g.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        let mut leaf = g.leaf_grads.borrow_mut();
        for i in (0..=self.id).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, node, gout, &mut grads, &mut leaf, i);
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn cap_factor(x: f64, cap: f64) -> f64 {
    if x <= cap {
        1.0
    } else {
        (cap / x).sqrt()
    }
}

/// `dst[t] += w · src[t + shift]` with zero padding.
fn conv_tap(dst: &mut [f64], src: &[f64], w: f64, shift: isize) {
    let t = dst.len() as isize;
    let lo = (-shift).max(0);
    let hi = (t - shift).min(t);
    for i in lo..hi {
        dst[i as usize] += w * src[(i + shift) as usize];
    }
}

/// Inverse of `conv_tap` with respect to `src`.
fn conv_tap_back(dsrc: &mut [f64], gdst: &[f64], w: f64, shift: isize) {
    let t = gdst.len() as isize;
    let lo = (-shift).max(0);
    let hi = (t - shift).min(t);
    for i in lo..hi {
        dsrc[(i + shift) as usize] += w * gdst[i as usize];
    }
}

fn conv_tap_dot(gdst: &[f64], src: &[f64], shift: isize) -> f64 {
    let t = gdst.len() as isize;
    let lo = (-shift).max(0);
    let hi = (t - shift).min(t);
    (lo..hi)
        .map(|i| gdst[i as usize] * src[(i + shift) as usize])
        .sum()
}

fn permute_values(v: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides(shape);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut y = vec![0.0; v.len()];
    if v.is_empty() {
        return y;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for d in y.iter_mut() {
        *d = v[src];
        let mut k = rank;
        while k > 0 {
            k -= 1;
            idx[k] += 1;
            src += perm_strides[k];
            if idx[k] < out[k] {
                break;
            }
            src -= perm_strides[k] * out[k];
            idx[k] = 0;
        }
    }
    y
}

fn acc<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(
    nodes: &[Node],
    node: &Node,
    gout: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    leaf: &mut HashMap<usize, Vec<f64>>,
    self_id: usize,
) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {
            let e = leaf.entry(self_id).or_insert_with(|| vec![0.0; gout.len()]);
            for (a, b) in e.iter_mut().zip(&gout) {
                *a += b;
            }
        }
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value;
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..gout.len() {
                    let (xi, yi) = (x[i], y[i]);
                    let d = match *kind {
                        Unary::Neg => -1.0,
                        Unary::Exp => yi,
                        Unary::Log => 1.0 / xi,
                        Unary::Sin => xi.cos(),
                        Unary::Cos => -xi.sin(),
                        Unary::Sqrt => 0.5 / yi,
                        Unary::Tanh => 1.0 - yi * yi,
                        Unary::Sigmoid => yi * (1.0 - yi),
                        Unary::Relu => (xi > 0.0) as u8 as f64,
                        Unary::Gelu => kernels::norm_cdf(xi) + xi * kernels::norm_pdf(xi),
                        Unary::LeakyRelu(s) => {
                            if xi > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        Unary::Hardtanh(lo, hi) => (xi > lo && xi < hi) as u8 as f64,
                        Unary::Square => 2.0 * xi,
                        Unary::CapFactor(cap) => {
                            if xi <= cap {
                                0.0
                            } else {
                                -0.5 * cap.sqrt() * xi.powf(-1.5)
                            }
                        }
                    };
                    ga[i] += gout[i] * d;
                }
            }
        }
        Op::Binary(kind, a, b) => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            let (ra, rb) = (nodes[*a].requires_grad, nodes[*b].requires_grad);
            let mut ga = ra.then(|| vec![0.0; av.len()]);
            let mut gb = rb.then(|| vec![0.0; bv.len()]);
            let mut f = |o: usize, ia: usize, ib: usize| {
                let g = gout[o];
                let (x, z) = (av[ia], bv[ib]);
                let (da, db) = match kind {
                    Binary::Add => (1.0, 1.0),
                    Binary::Sub => (1.0, -1.0),
                    Binary::Mul => (z, x),
                    Binary::Div => (1.0 / z, -x / (z * z)),
                    Binary::Maximum => {
                        if x > z {
                            (1.0, 0.0)
                        } else if x < z {
                            (0.0, 1.0)
                        } else {
                            (0.5, 0.5)
                        }
                    }
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += g * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += g * db;
                }
            };
            if sa == sb {
                for i in 0..gout.len() {
                    f(i, i, i);
                }
            } else {
                for_each_broadcast(&node.shape, sa, sb, f);
            }
            if let (Some(src), Some(dst)) = (ga, acc(grads, nodes, *a)) {
                add_into(dst, &src);
            }
            if let (Some(src), Some(dst)) = (gb, acc(grads, nodes, *b)) {
                add_into(dst, &src);
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (d, g) in ga.iter_mut().zip(&gout) {
                    *d += c * g;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, &gout);
            }
        }
        Op::Broadcast(a) => {
            let sa = nodes[*a].shape.clone();
            if let Some(ga) = acc(grads, nodes, *a) {
                for_each_broadcast(&node.shape, &sa, &[], |o, ia, _| ga[ia] += gout[o]);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = acc(grads, nodes, *a) {
                kernels::gemm_nt(&gout, &bv, ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                kernels::gemm_tn(&av, &gout, gb, m, k, n);
            }
        }
        Op::Bmm(a, b) => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..bsz {
                    kernels::gemm_nt(
                        &gout[i * m * n..(i + 1) * m * n],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..bsz {
                    kernels::gemm_tn(
                        &av[i * m * k..(i + 1) * m * k],
                        &gout[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Op::Permute(a, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inv[ax] = i;
            }
            let back = permute_values(&gout, &node.shape, &inv);
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, &back);
            }
        }
        Op::Concat(parts, axis) => {
            let s = &node.shape;
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].shape[*axis];
                if let Some(gp) = acc(grads, nodes, p) {
                    for o in 0..outer {
                        let src = o * s[*axis] * inner + offset * inner;
                        let dst = o * len * inner;
                        add_into(
                            &mut gp[dst..dst + len * inner],
                            &gout[src..src + len * inner],
                        );
                    }
                }
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let s = nodes[*a].shape.clone();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = node.shape[*axis];
            if let Some(ga) = acc(grads, nodes, *a) {
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    add_into(
                        &mut ga[dst..dst + len * inner],
                        &gout[src..src + len * inner],
                    );
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|d| *d += gout[0]);
            }
        }
        Op::SumAxis(a, axis) => {
            let s = nodes[*a].shape.clone();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            if let Some(ga) = acc(grads, nodes, *a) {
                for o in 0..outer {
                    for k in 0..s[*axis] {
                        let dst = (o * s[*axis] + k) * inner;
                        add_into(&mut ga[dst..dst + inner], &gout[o * inner..(o + 1) * inner]);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let n = *node.shape.last().unwrap();
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((yr, gr), dr) in y.chunks(n).zip(gout.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Normalize { a, rstd, group } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                match group {
                    Grouping::LastAxis => {
                        let n = *node.shape.last().unwrap();
                        for (r, ((yr, gr), dr)) in y
                            .chunks(n)
                            .zip(gout.chunks(n))
                            .zip(ga.chunks_mut(n))
                            .enumerate()
                        {
                            let mg = gr.iter().sum::<f64>() / n as f64;
                            let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                            for j in 0..n {
                                dr[j] += rstd[r] * (gr[j] - mg - yr[j] * mgy);
                            }
                        }
                    }
                    Grouping::Channel => {
                        let s = &node.shape;
                        let (c, t) = (s[s.len() - 2], s[s.len() - 1]);
                        let outer = y.len() / (c * t).max(1);
                        let count = (outer * t) as f64;
                        let mut mg = vec![0.0; c];
                        let mut mgy = vec![0.0; c];
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * t;
                                for i in base..base + t {
                                    mg[ch] += gout[i];
                                    mgy[ch] += gout[i] * y[i];
                                }
                            }
                        }
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * t;
                                for i in base..base + t {
                                    ga[i] += rstd[ch]
                                        * (gout[i] - mg[ch] / count - y[i] * mgy[ch] / count);
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Conv1d { x, w } => {
            let (sx, sw) = (nodes[*x].shape.clone(), nodes[*w].shape.clone());
            let (cin, t) = (sx[sx.len() - 2], sx[sx.len() - 1]);
            let (cout, k) = (sw[0], sw[2]);
            let pad = (k - 1) / 2;
            let outer = numel(&sx) / (cin * t).max(1);
            let (xv, wv) = (nodes[*x].value.clone(), nodes[*w].value.clone());
            if let Some(gx) = acc(grads, nodes, *x) {
                for n in 0..outer {
                    for o in 0..cout {
                        let gd = &gout[(n * cout + o) * t..(n * cout + o + 1) * t];
                        for c in 0..cin {
                            let dst = &mut gx[(n * cin + c) * t..(n * cin + c + 1) * t];
                            for j in 0..k {
                                conv_tap_back(
                                    dst,
                                    gd,
                                    wv[(o * cin + c) * k + j],
                                    j as isize - pad as isize,
                                );
                            }
                        }
                    }
                }
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                for n in 0..outer {
                    for o in 0..cout {
                        let gd = &gout[(n * cout + o) * t..(n * cout + o + 1) * t];
                        for c in 0..cin {
                            let src = &xv[(n * cin + c) * t..(n * cin + c + 1) * t];
                            for j in 0..k {
                                gw[(o * cin + c) * k + j] +=
                                    conv_tap_dot(gd, src, j as isize - pad as isize);
                            }
                        }
                    }
                }
            }
        }
        Op::DwConv1d { x, w } => {
            let (sx, sw) = (nodes[*x].shape.clone(), nodes[*w].shape.clone());
            let (c, t) = (sx[sx.len() - 2], sx[sx.len() - 1]);
            let k = sw[1];
            let pad = (k - 1) / 2;
            let outer = numel(&sx) / (c * t).max(1);
            let (xv, wv) = (nodes[*x].value.clone(), nodes[*w].value.clone());
            if let Some(gx) = acc(grads, nodes, *x) {
                for n in 0..outer {
                    for ch in 0..c {
                        let off = (n * c + ch) * t;
                        for j in 0..k {
                            conv_tap_back(
                                &mut gx[off..off + t],
                                &gout[off..off + t],
                                wv[ch * k + j],
                                j as isize - pad as isize,
                            );
                        }
                    }
                }
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                for n in 0..outer {
                    for ch in 0..c {
                        let off = (n * c + ch) * t;
                        for j in 0..k {
                            gw[ch * k + j] += conv_tap_dot(
                                &gout[off..off + t],
                                &xv[off..off + t],
                                j as isize - pad as isize,
                            );
                        }
                    }
                }
            }
        }
        Op::MaxPool { a, argmax } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (&src, g) in argmax.iter().zip(&gout) {
                    ga[src] += g;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
