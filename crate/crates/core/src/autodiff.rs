//! Eager reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! the backward pass is a single reverse sweep.
//!
//! Shape errors while building a graph are programming errors and panic;
//! non-finite values are recorded and reported by [`Graph::backward`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// A contiguous run of rows forming one sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf { trainable: bool },
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Gelu(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SelectCols(NodeId, Vec<usize>),
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Segment>,
        /// Per segment, row-major lower-triangular attention weights.
        probs: Vec<Vec<T>>,
    },
    WeightedNll {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<T>,
    },
    TokenLogProb {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    JumpRelu {
        z: NodeId,
        log_threshold: NodeId,
        bandwidth: T,
    },
    ActiveCount {
        z: NodeId,
        log_threshold: NodeId,
        bandwidth: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::GatherRows(..) => "gather_rows",
            Op::SelectCols(..) => "select_cols",
            Op::CausalAttention { .. } => "causal_attention",
            Op::WeightedNll { .. } => "weighted_nll",
            Op::TokenLogProb { .. } => "token_log_prob",
            Op::JumpRelu { .. } => "jump_relu",
            Op::ActiveCount { .. } => "active_count",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GatherRows(a, _)
            | Op::SelectCols(a, _) => vec![*a],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::WeightedNll { logits, .. } | Op::TokenLogProb { logits, .. } => vec![*logits],
            Op::JumpRelu { z, log_threshold, .. } | Op::ActiveCount { z, log_threshold, .. } => {
                vec![*z, *log_threshold]
            }
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    first_non_finite: Option<NodeId>,
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    T::of(gelu(x.f64()))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rectangle kernel of width 1 centred on zero.
fn rect(u: f64) -> f64 {
    if u.abs() < 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Row softmax in place; returns log-sum-exp per row.
fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> (Vec<T>, Vec<f64>) {
    let rows = x.len() / cols.max(1);
    let mut out = vec![T::zero(); x.len()];
    let mut lse = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (v.f64() - max).exp();
            z += e;
            *o = T::of(e);
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o = T::of(o.f64() / z);
        }
        lse.push(max + z.ln());
    }
    (out, lse)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Input ids of a node; always smaller than the node's own id.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { trainable } => *trainable,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        let id = NodeId(self.nodes.len());
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        id
    }

    /// A trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf { trainable: true }, value)
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf { trainable: false }, value)
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let t = self.value(id);
        match t.rank() {
            2 => (t.shape()[0], t.shape()[1]),
            1 => (1, t.shape()[0]),
            r => panic!("node {} has rank {r}, expected a matrix", id.0),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMulNt(a, b), Tensor::from_parts(vec![m, n], out))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{} shape mismatch", op.name());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.dims2(a);
        assert_eq!(self.value(row).len(), n, "add_row width mismatch");
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *x = *x + b;
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Op::AddRow(a, row), Tensor::from_parts(shape, data))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let v = self.value(a).map(f);
        self.push(op, v)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: T) -> NodeId {
        self.unary(a, |x| x + s, Op::AddScalar(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu_scalar, Op::Gelu(a))
    }

    /// `max(x, 0)`; the subgradient at exactly zero is taken as zero.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| T::of(softplus(x.f64())), Op::Softplus(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum_f64();
        self.push(Op::Sum(a), Tensor::scalar(T::of(s)))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        assert!(!v.is_empty(), "mean of empty tensor");
        let s = v.sum_f64() / v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(T::of(s)))
    }

    /// Picks rows by index (embedding lookup, position selection).
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let (m, n) = self.dims2(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "gather_rows index {r} out of {m}");
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        self.push(
            Op::GatherRows(a, rows.to_vec()),
            Tensor::from_parts(vec![rows.len(), n], data),
        )
    }

    pub fn select_cols(&mut self, a: NodeId, cols: &[usize]) -> NodeId {
        let (m, n) = self.dims2(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            for &c in cols {
                assert!(c < n, "select_cols index {c} out of {n}");
                data.push(src[i * n + c]);
            }
        }
        self.push(
            Op::SelectCols(a, cols.to_vec()),
            Tensor::from_parts(vec![m, cols.len()], data),
        )
    }

    /// Single-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, d]`; each segment attends only within itself
    /// and only to earlier-or-equal positions. Scores are scaled by `1/sqrt(d)`.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, segments: &[Segment]) -> NodeId {
        let (rows, d) = self.dims2(q);
        assert_eq!(self.dims2(k), (rows, d));
        assert_eq!(self.dims2(v), (rows, d));
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            segments,
        );
        self.push(
            Op::CausalAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                probs,
            },
            Tensor::from_parts(vec![rows, d], out),
        )
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i])` accumulated in f64.
    pub fn weighted_nll(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> NodeId {
        let (rows, vocab) = self.dims2(logits);
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let x = self.value(logits).data();
        let (probs, lse) = softmax_rows(x, vocab);
        let mut total = 0.0;
        for r in 0..rows {
            if weights[r] != 0.0 {
                assert!(targets[r] < vocab);
                total += weights[r] * (lse[r] - x[r * vocab + targets[r]].f64());
            }
        }
        self.push(
            Op::WeightedNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            Tensor::scalar(T::of(total)),
        )
    }

    /// Per-row `log softmax(logits_i)[t_i]` as a vector.
    pub fn token_log_prob(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (rows, vocab) = self.dims2(logits);
        assert_eq!(targets.len(), rows);
        let x = self.value(logits).data();
        let (probs, lse) = softmax_rows(x, vocab);
        let out = (0..rows)
            .map(|r| T::of(x[r * vocab + targets[r]].f64() - lse[r]))
            .collect();
        self.push(
            Op::TokenLogProb {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::vector(out),
        )
    }

    /// JumpReLU with thresholds `exp(log_threshold)`: passes `z` where it
    /// strictly exceeds the threshold, zero elsewhere. The threshold receives
    /// a straight-through pseudo-gradient with a rectangle kernel of width
    /// `bandwidth`.
    pub fn jump_relu(&mut self, z: NodeId, log_threshold: NodeId, bandwidth: T) -> NodeId {
        let (m, n) = self.dims2(z);
        assert_eq!(self.value(log_threshold).len(), n);
        let th: Vec<T> = self.value(log_threshold).data().iter().map(|x| x.exp()).collect();
        let src = self.value(z).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let v = src[i * n + j];
                data.push(if v > th[j] { v } else { T::zero() });
            }
        }
        let shape = self.value(z).shape().to_vec();
        self.push(
            Op::JumpRelu {
                z,
                log_threshold,
                bandwidth,
            },
            Tensor::from_parts(shape, data),
        )
    }

    /// Number of entries of `z` above their column threshold; thresholds get
    /// the same straight-through pseudo-gradient as [`Graph::jump_relu`].
    pub fn active_count(&mut self, z: NodeId, log_threshold: NodeId, bandwidth: T) -> NodeId {
        let (m, n) = self.dims2(z);
        assert_eq!(self.value(log_threshold).len(), n);
        let th: Vec<T> = self.value(log_threshold).data().iter().map(|x| x.exp()).collect();
        let src = self.value(z).data();
        let mut count = 0usize;
        for i in 0..m {
            for j in 0..n {
                if src[i * n + j] > th[j] {
                    count += 1;
                }
            }
        }
        self.push(
            Op::ActiveCount {
                z,
                log_threshold,
                bandwidth,
            },
            Tensor::scalar(T::of(count as f64)),
        )
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every
    /// trainable leaf that the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "loss node {} has shape {:?}, expected a scalar",
                loss.0,
                lv.shape()
            )));
        }
        if let Some(bad) = self.first_non_finite {
            if bad.0 <= loss.0 {
                return Err(Error::numeric(
                    format!("node {} ({})", bad.0, self.op_name(bad)),
                    "non-finite forward value",
                ));
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = HashMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::numeric(
                    format!("node {idx} ({})", node.op.name()),
                    "non-finite gradient",
                ));
            }
            if let Op::Leaf { .. } = node.op {
                out.insert(NodeId(idx), g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e = *e + *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                if self.wants(*a) {
                    let ga = matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(self.value(*a).shape().to_vec(), ga));
                }
                if self.wants(*b) {
                    let gb = matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
                }
            }
            Op::MatMulNt(a, b) => {
                // out[m,n] = a[m,k] b[n,k]^T
                let (m, k) = self.dims2(*a);
                let (n, _) = self.dims2(*b);
                if self.wants(*a) {
                    let ga = matmul(g.data(), self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(self.value(*a).shape().to_vec(), ga));
                }
                if self.wants(*b) {
                    let gb = matmul_tn(g.data(), self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), d));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let (m, n) = self.dims2(*a);
                    let mut d = vec![T::zero(); n];
                    for i in 0..m {
                        for (acc, &x) in d.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                            *acc = *acc + x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::from_parts(shape, d));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * T::of(gelu_grad(xv.f64())))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * T::of(sigmoid(xv.f64())))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.shape(), g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let v = T::of(g.item().f64() / x.len() as f64);
                self.accumulate(grads, *a, Tensor::full(x.shape(), v));
            }
            Op::GatherRows(a, rows) => {
                if self.wants(*a) {
                    let (m, n) = self.dims2(*a);
                    let mut d = vec![T::zero(); m * n];
                    for (i, &r) in rows.iter().enumerate() {
                        for (acc, &x) in d[r * n..(r + 1) * n].iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                            *acc = *acc + x;
                        }
                    }
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, Tensor::from_parts(shape, d));
                }
            }
            Op::SelectCols(a, cols) => {
                if self.wants(*a) {
                    let (m, n) = self.dims2(*a);
                    let mut d = vec![T::zero(); m * n];
                    for i in 0..m {
                        for (c, &col) in cols.iter().enumerate() {
                            d[i * n + col] = d[i * n + col] + g.data()[i * cols.len() + c];
                        }
                    }
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, Tensor::from_parts(shape, d));
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segments,
                probs,
            } => {
                let (rows, d) = self.dims2(*q);
                let (gq, gk, gv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    g.data(),
                    d,
                    segments,
                    probs,
                );
                let shape = vec![rows, d];
                self.accumulate(grads, *q, Tensor::from_parts(shape.clone(), gq));
                self.accumulate(grads, *k, Tensor::from_parts(shape.clone(), gk));
                self.accumulate(grads, *v, Tensor::from_parts(shape, gv));
            }
            Op::WeightedNll {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (rows, vocab) = self.dims2(*logits);
                let gs = g.item().f64();
                let mut d = vec![T::zero(); rows * vocab];
                for r in 0..rows {
                    let w = weights[r];
                    if w == 0.0 {
                        continue;
                    }
                    let scale = T::of(gs * w);
                    for c in 0..vocab {
                        d[r * vocab + c] = probs[r * vocab + c] * scale;
                    }
                    d[r * vocab + targets[r]] = d[r * vocab + targets[r]] - scale;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::from_parts(shape, d));
            }
            Op::TokenLogProb {
                logits,
                targets,
                probs,
            } => {
                let (rows, vocab) = self.dims2(*logits);
                let mut d = vec![T::zero(); rows * vocab];
                for r in 0..rows {
                    let gr = g.data()[r];
                    for c in 0..vocab {
                        d[r * vocab + c] = -probs[r * vocab + c] * gr;
                    }
                    d[r * vocab + targets[r]] = d[r * vocab + targets[r]] + gr;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::from_parts(shape, d));
            }
            Op::JumpRelu {
                z,
                log_threshold,
                bandwidth,
            } => {
                let (m, n) = self.dims2(*z);
                let zv = self.value(*z).data();
                let lt = self.value(*log_threshold).data();
                let th: Vec<f64> = lt.iter().map(|x| x.f64().exp()).collect();
                let eps = bandwidth.f64();
                if self.wants(*z) {
                    let mut d = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            if zv[i * n + j].f64() > th[j] {
                                d[i * n + j] = g.data()[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *z, Tensor::from_parts(self.value(*z).shape().to_vec(), d));
                }
                if self.wants(*log_threshold) {
                    let mut d = vec![0.0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            let k = rect((zv[i * n + j].f64() - th[j]) / eps);
                            if k != 0.0 {
                                // d/dθ ≈ −(θ/ε)K, then chain through θ = exp(logθ).
                                d[j] += g.data()[i * n + j].f64() * (-th[j] / eps) * k * th[j];
                            }
                        }
                    }
                    let shape = self.value(*log_threshold).shape().to_vec();
                    self.accumulate(
                        grads,
                        *log_threshold,
                        Tensor::from_parts(shape, d.into_iter().map(T::of).collect()),
                    );
                }
            }
            Op::ActiveCount {
                z,
                log_threshold,
                bandwidth,
            } => {
                if self.wants(*log_threshold) {
                    let (m, n) = self.dims2(*z);
                    let zv = self.value(*z).data();
                    let lt = self.value(*log_threshold).data();
                    let eps = bandwidth.f64();
                    let gs = g.item().f64();
                    let mut d = vec![0.0f64; n];
                    for j in 0..n {
                        let th = lt[j].f64().exp();
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += rect((zv[i * n + j].f64() - th) / eps);
                        }
                        d[j] = gs * (-acc / eps) * th;
                    }
                    let shape = self.value(*log_threshold).shape().to_vec();
                    self.accumulate(
                        grads,
                        *log_threshold,
                        Tensor::from_parts(shape, d.into_iter().map(T::of).collect()),
                    );
                }
            }
        }
    }
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    segments: &[Segment],
) -> (Vec<T>, Vec<Vec<T>>) {
    let scale = 1.0 / (d as f64).sqrt();
    let rows = q.len() / d;
    let mut out = vec![T::zero(); rows * d];
    let mut all_probs = Vec::with_capacity(segments.len());
    for seg in segments {
        let n = seg.len;
        let mut probs = vec![T::zero(); n * n];
        let mut scores = vec![0.0f64; n];
        for i in 0..n {
            let qi = &q[(seg.start + i) * d..(seg.start + i + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k[(seg.start + j) * d..(seg.start + j + 1) * d];
                let s = dot(qi, kj).f64() * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for s in scores.iter_mut().take(i + 1) {
                *s = (*s - max).exp();
                z += *s;
            }
            let orow = &mut out[(seg.start + i) * d..(seg.start + i + 1) * d];
            for j in 0..=i {
                let p = T::of(scores[j] / z);
                probs[i * n + j] = p;
                let vj = &v[(seg.start + j) * d..(seg.start + j + 1) * d];
                for (o, &x) in orow.iter_mut().zip(vj) {
                    *o = *o + p * x;
                }
            }
        }
        all_probs.push(probs);
    }
    (out, all_probs)
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    gout: &[T],
    d: usize,
    segments: &[Segment],
    probs: &[Vec<T>],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::of(1.0 / (d as f64).sqrt());
    let rows = q.len() / d;
    let mut gq = vec![T::zero(); rows * d];
    let mut gk = vec![T::zero(); rows * d];
    let mut gv = vec![T::zero(); rows * d];
    let mut dp = Vec::new();
    for (seg, p) in segments.iter().zip(probs) {
        let n = seg.len;
        for i in 0..n {
            let gi = &gout[(seg.start + i) * d..(seg.start + i + 1) * d];
            dp.clear();
            let mut weighted = T::zero();
            for j in 0..=i {
                let vj = &v[(seg.start + j) * d..(seg.start + j + 1) * d];
                let pij = p[i * n + j];
                let dpij = dot(gi, vj);
                dp.push(dpij);
                weighted = weighted + pij * dpij;
                let gvj = &mut gv[(seg.start + j) * d..(seg.start + j + 1) * d];
                for (o, &x) in gvj.iter_mut().zip(gi) {
                    *o = *o + pij * x;
                }
            }
            for j in 0..=i {
                let ds = p[i * n + j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let (qi_start, kj_start) = ((seg.start + i) * d, (seg.start + j) * d);
                for c in 0..d {
                    gq[qi_start + c] = gq[qi_start + c] + ds * k[kj_start + c];
                    gk[kj_start + c] = gk[kj_start + c] + ds * q[qi_start + c];
                }
            }
        }
    }
    (gq, gk, gv)
}
