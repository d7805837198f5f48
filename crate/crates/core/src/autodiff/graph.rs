//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every builder method evaluates its op eagerly and appends a node, so node
//! order is a topological order and `backward` is a single reverse sweep.
//! Parameters are borrowed from a [`ParamStore`]; the graph never mutates them.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    MatMul,
    Linear,
    Add,
    Multiply,
    Scale,
    Tanh,
    Gelu,
    Softmax,
    LayerNorm,
    Embedding,
    MeanRows,
    Concat,
    Slice,
    StopGradient,
    CrossEntropy,
    Attention,
    Dropout,
    Sum,
}

/// Shape of a batched self-attention call: `batch` sequences of `seq`
/// positions each, flattened row-major into `batch * seq` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `batch * seq` flags; `false` keys are never attended to.
    pub valid: Arc<Vec<bool>>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul,
    Linear,
    Add {
        broadcast: bool,
    },
    Multiply {
        broadcast: bool,
    },
    Scale(T),
    Tanh,
    Gelu {
        gate: Vec<T>,
    },
    Softmax,
    LayerNorm {
        inv_std: Vec<T>,
    },
    Embedding {
        ids: Vec<usize>,
    },
    MeanRows,
    Concat {
        rows: Vec<usize>,
    },
    Slice {
        start: usize,
    },
    StopGradient,
    CrossEntropy {
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        layout: AttentionLayout,
        probs: Vec<T>,
    },
    Dropout {
        mask: Vec<T>,
    },
    Sum,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::MatMul => OpKind::MatMul,
            Op::Linear => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::Multiply { .. } => OpKind::Multiply,
            Op::Scale(_) => OpKind::Scale,
            Op::Tanh => OpKind::Tanh,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::MeanRows => OpKind::MeanRows,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::StopGradient => OpKind::StopGradient,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Attention { .. } => OpKind::Attention,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum => OpKind::Sum,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Element = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn contains(&self, kind: OpKind) -> bool {
        self.nodes.iter().any(|n| n.op.kind() == kind)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.tensor(*p),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    /// Looks up a value bound with [`Graph::input_named`].
    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = match &op {
            Op::Input | Op::StopGradient => false,
            Op::Param(p) => self.params.get(*p).trainable,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value: Some(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, Vec::new(), value)
    }

    pub fn input_named(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        let id = self.input(value);
        self.names.insert(name.into(), id);
        id
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let requires_grad = self.params.get(id).trainable;
        self.nodes.push(Node {
            op: Op::Param(id),
            inputs: Vec::new(),
            value: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        Ok(self.param(id))
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (av.data(), k as isize, 1),
            (bv.data(), n as isize, 1),
            T::zero(),
            (out.data_mut(), n as isize, 1),
        );
        Ok(self.push(Op::MatMul, vec![a, b], out))
    }

    /// `x (n x k) * w (k x m) + bias (m)`, bias broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        if wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(shape_err("linear", xv.shape(), wv.shape()));
        }
        if bv.len() != wv.cols() {
            return Err(shape_err("linear", wv.shape(), bv.shape()));
        }
        let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(bv.data());
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = m;
        let mut out = Tensor::new(shape, data)?;
        T::gemm(
            n,
            k,
            m,
            T::one(),
            (xv.data(), k as isize, 1),
            (wv.data(), m as isize, 1),
            T::one(),
            (out.data_mut(), m as isize, 1),
        );
        Ok(self.push(Op::Linear, vec![x, w, bias], out))
    }

    fn broadcast_kind(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<bool> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(false)
        } else if bv.shape().len() == 1 && bv.len() == av.cols() {
            Ok(true)
        } else {
            Err(shape_err(op, av.shape(), bv.shape()))
        }
    }

    /// Elementwise sum; `b` may also be a vector broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let broadcast = self.broadcast_kind("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let rhs = if broadcast {
                bv.data()[i % c]
            } else {
                bv.data()[i]
            };
            *o = *o + rhs;
        }
        Ok(self.push(Op::Add { broadcast }, vec![a, b], out))
    }

    /// Elementwise product; `b` may also be a vector broadcast over `a`'s rows.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let broadcast = self.broadcast_kind("multiply", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let rhs = if broadcast {
                bv.data()[i % c]
            } else {
                bv.data()[i]
            };
            *o = *o * rhs;
        }
        Ok(self.push(Op::Multiply { broadcast }, vec![a, b], out))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        self.push(Op::Scale(factor), vec![a], out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(Op::Tanh, vec![a], out)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let mut out = self.value(a).clone();
        let gate: Vec<T> = out.data().iter().map(|&x| gelu_gate(x, c, k)).collect();
        out.data_mut()
            .iter_mut()
            .zip(&gate)
            .for_each(|(v, &s)| *v = *v * s);
        self.push(Op::Gelu { gate }, vec![a], out)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Op::Softmax, vec![a], out)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let c = out.cols();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let n = T::from_count(c);
        let mut inv_std = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / n;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(Op::LayerNorm { inv_std }, vec![a], out)
    }

    /// Gathers rows of a 2-D table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(shape_err("embedding", tv.shape(), &[ids.len()]));
        }
        let (rows, c) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(Op::Embedding { ids: ids.to_vec() }, vec![table], out))
    }

    /// Mean over rows; output is a vector of length `cols`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if r == 0 {
            return Err(shape_err("mean-over-rows", av.shape(), &[]));
        }
        let mut out = vec![T::zero(); c];
        for row in av.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let n = T::from_count(r);
        out.iter_mut().for_each(|v| *v = *v / n);
        Ok(self.push(Op::MeanRows, vec![a], Tensor::vector(out)))
    }

    /// Stacks inputs along rows; vectors count as single rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concatenate of zero inputs".into()))?;
        let c = self.value(*first).cols();
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(shape_err(
                    "concatenate",
                    self.value(*first).shape(),
                    v.shape(),
                ));
            }
            rows.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total = rows.iter().sum();
        let out = Tensor::new(vec![total, c], data)?;
        Ok(self.push(Op::Concat { rows }, parts.to_vec(), out))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        let c = av.cols();
        if start + len > av.rows() {
            return Err(shape_err("slice", av.shape(), &[start, len]));
        }
        let out = Tensor::new(
            vec![len, c],
            av.data()[start * c..(start + len) * c].to_vec(),
        )?;
        Ok(self.push(Op::Slice { start }, vec![a], out))
    }

    /// Forward identity; blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).clone();
        self.push(Op::StopGradient, vec![a], out)
    }

    /// Mean softmax cross-entropy of `logits (batch x classes)` against labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if labels.len() != b || b == 0 {
            return Err(shape_err("cross-entropy-loss", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss = loss - row[y].max(T::min_positive_value()).ln();
        }
        let loss = loss / T::from_count(b);
        Ok(self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    /// Multi-head scaled dot-product self-attention over projected inputs.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &AttentionLayout,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, t, h) = (layout.batch, layout.seq, layout.heads);
        let d = qv.cols();
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if qv.rows() != b * t || layout.valid.len() != b * t || h == 0 || d % h != 0 {
            return Err(shape_err("attention", qv.shape(), &[b, t, h]));
        }
        let dh = d / h;
        let scale = T::one() / T::from_count(dh).sqrt();
        let mut probs = vec![T::zero(); b * h * t * t];
        let mut out = Tensor::zeros(qv.shape());
        let ds = d as isize;
        for bi in 0..b {
            let valid = &layout.valid[bi * t..(bi + 1) * t];
            for hi in 0..h {
                let off = bi * t * d + hi * dh;
                let p = &mut probs[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                T::gemm(
                    t,
                    dh,
                    t,
                    scale,
                    (&qv.data()[off..], ds, 1),
                    (&kv.data()[off..], 1, ds),
                    T::zero(),
                    (p, t as isize, 1),
                );
                for row in p.chunks_mut(t) {
                    masked_softmax_in_place(row, valid);
                }
                T::gemm(
                    t,
                    t,
                    dh,
                    T::one(),
                    (p, t as isize, 1),
                    (&vv.data()[off..], ds, 1),
                    T::zero(),
                    (&mut out.data_mut()[off..], ds, 1),
                );
            }
        }
        Ok(self.push(
            Op::Attention {
                layout: layout.clone(),
                probs,
            },
            vec![q, k, v],
            out,
        ))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> NodeId {
        if rate <= 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let av = self.value(a);
        let mask: Vec<T> = (0..av.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = av.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * *m;
        }
        self.push(Op::Dropout { mask }, vec![a], out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().fold(T::zero(), |s, &v| s + v);
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            grads: (0..self.params.len()).map(|_| None).collect(),
        };
        if !self.nodes[root.0].requires_grad {
            return Ok(out);
        }
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Param(p) = node.op {
                match &mut out.grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (slot, input_grad) in self.input_grads(idx, &g)? {
                let target = &mut grads[slot.0];
                match target {
                    Some(acc) => acc.add_assign(&input_grad),
                    None => *target = Some(input_grad),
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradients flowing from node `idx` into each of its inputs that
    /// requires one.
    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        let y = node.value.as_ref();
        let mut res = Vec::with_capacity(ins.len());
        match &node.op {
            Op::Input | Op::Param(_) | Op::StopGradient => {}
            Op::MatMul => {
                let (a, b) = (self.value(ins[0]), self.value(ins[1]));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if self.wants(ins[0]) {
                    let mut da = Tensor::zeros(a.shape());
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        (g.data(), n as isize, 1),
                        (b.data(), 1, n as isize),
                        T::zero(),
                        (da.data_mut(), k as isize, 1),
                    );
                    res.push((ins[0], da));
                }
                if self.wants(ins[1]) {
                    let mut db = Tensor::zeros(b.shape());
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        (a.data(), 1, k as isize),
                        (g.data(), n as isize, 1),
                        T::zero(),
                        (db.data_mut(), n as isize, 1),
                    );
                    res.push((ins[1], db));
                }
            }
            Op::Linear => {
                let (x, w) = (self.value(ins[0]), self.value(ins[1]));
                let (n, k, m) = (x.rows(), x.cols(), w.cols());
                if self.wants(ins[0]) {
                    let mut dx = Tensor::zeros(x.shape());
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        (g.data(), m as isize, 1),
                        (w.data(), 1, m as isize),
                        T::zero(),
                        (dx.data_mut(), k as isize, 1),
                    );
                    res.push((ins[0], dx));
                }
                if self.wants(ins[1]) {
                    let mut dw = Tensor::zeros(w.shape());
                    T::gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        (x.data(), 1, k as isize),
                        (g.data(), m as isize, 1),
                        T::zero(),
                        (dw.data_mut(), m as isize, 1),
                    );
                    res.push((ins[1], dw));
                }
                if self.wants(ins[2]) {
                    res.push((ins[2], column_sums(g, self.value(ins[2]).shape())));
                }
            }
            Op::Add { broadcast } => {
                if self.wants(ins[0]) {
                    res.push((ins[0], g.clone()));
                }
                if self.wants(ins[1]) {
                    let gb = if *broadcast {
                        column_sums(g, self.value(ins[1]).shape())
                    } else {
                        g.clone()
                    };
                    res.push((ins[1], gb));
                }
            }
            Op::Multiply { broadcast } => {
                let (a, b) = (self.value(ins[0]), self.value(ins[1]));
                let c = a.cols();
                if self.wants(ins[0]) {
                    let mut da = g.clone();
                    for (i, v) in da.data_mut().iter_mut().enumerate() {
                        let rhs = if *broadcast {
                            b.data()[i % c]
                        } else {
                            b.data()[i]
                        };
                        *v = *v * rhs;
                    }
                    res.push((ins[0], da));
                }
                if self.wants(ins[1]) {
                    let mut prod = g.clone();
                    for (v, &av) in prod.data_mut().iter_mut().zip(a.data()) {
                        *v = *v * av;
                    }
                    let db = if *broadcast {
                        column_sums(&prod, b.shape())
                    } else {
                        prod
                    };
                    res.push((ins[1], db));
                }
            }
            Op::Scale(s) => {
                let mut da = g.clone();
                da.data_mut().iter_mut().for_each(|v| *v = *v * *s);
                res.push((ins[0], da));
            }
            Op::Tanh => {
                let y = y.expect("tanh value");
                let mut da = g.clone();
                for (v, &t) in da.data_mut().iter_mut().zip(y.data()) {
                    *v = *v * (T::one() - t * t);
                }
                res.push((ins[0], da));
            }
            Op::Gelu { gate } => {
                let x = self.value(ins[0]);
                let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let two = T::from_f64(2.0);
                let three = T::from_f64(3.0);
                let mut da = g.clone();
                for ((v, &xv), &s) in da.data_mut().iter_mut().zip(x.data()).zip(gate) {
                    let d =
                        s + two * xv * s * (T::one() - s) * c * (T::one() + three * k * xv * xv);
                    *v = *v * d;
                }
                res.push((ins[0], da));
            }
            Op::Softmax => {
                let y = y.expect("softmax value");
                let c = y.cols();
                let mut da = g.clone();
                for (grow, yrow) in da.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot = grow
                        .iter()
                        .zip(yrow)
                        .fold(T::zero(), |s, (&gv, &yv)| s + gv * yv);
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                res.push((ins[0], da));
            }
            Op::LayerNorm { inv_std } => {
                let y = y.expect("layer-norm value");
                let c = y.cols();
                let n = T::from_count(c);
                let mut da = g.clone();
                for ((grow, yrow), &inv) in da
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(inv_std)
                {
                    let mean_g = grow.iter().fold(T::zero(), |s, &v| s + v) / n;
                    let mean_gy = grow
                        .iter()
                        .zip(yrow)
                        .fold(T::zero(), |s, (&gv, &yv)| s + gv * yv)
                        / n;
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = inv * (*gv - mean_g - yv * mean_gy);
                    }
                }
                res.push((ins[0], da));
            }
            Op::Embedding { ids } => {
                let table = self.value(ins[0]);
                let c = table.cols();
                let mut dt = Tensor::zeros(table.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * c..(id + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *d = *d + s;
                    }
                }
                res.push((ins[0], dt));
            }
            Op::MeanRows => {
                let a = self.value(ins[0]);
                let n = T::from_count(a.rows());
                let mut da = Tensor::zeros(a.shape());
                for row in da.data_mut().chunks_mut(a.cols()) {
                    for (d, &s) in row.iter_mut().zip(g.data()) {
                        *d = s / n;
                    }
                }
                res.push((ins[0], da));
            }
            Op::Concat { rows } => {
                let c = g.cols();
                let mut start = 0;
                for (&input, &r) in ins.iter().zip(rows) {
                    if self.wants(input) {
                        let shape = self.value(input).shape().to_vec();
                        let part = g.data()[start * c..(start + r) * c].to_vec();
                        res.push((input, Tensor::new(shape, part)?));
                    }
                    start += r;
                }
            }
            Op::Slice { start } => {
                let a = self.value(ins[0]);
                let c = a.cols();
                let mut da = Tensor::zeros(a.shape());
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                res.push((ins[0], da));
            }
            Op::CrossEntropy { labels, probs } => {
                let logits = self.value(ins[0]);
                let c = logits.cols();
                let scale = g.item() / T::from_count(labels.len());
                let mut dl = Tensor::new(logits.shape().to_vec(), probs.clone())?;
                for (row, &y) in dl.data_mut().chunks_mut(c).zip(labels) {
                    row[y] = row[y] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                res.push((ins[0], dl));
            }
            Op::Attention { layout, probs } => {
                res.extend(self.attention_grads(ins, layout, probs, g));
            }
            Op::Dropout { mask } => {
                let mut da = g.clone();
                for (v, &m) in da.data_mut().iter_mut().zip(mask) {
                    *v = *v * m;
                }
                res.push((ins[0], da));
            }
            Op::Sum => {
                let a = self.value(ins[0]);
                res.push((ins[0], Tensor::full(a.shape(), g.item())));
            }
        }
        Ok(res)
    }

    fn attention_grads(
        &self,
        ins: &[NodeId],
        layout: &AttentionLayout,
        probs: &[T],
        g: &Tensor<T>,
    ) -> Vec<(NodeId, Tensor<T>)> {
        let (qv, kv, vv) = (self.value(ins[0]), self.value(ins[1]), self.value(ins[2]));
        let (b, t, h) = (layout.batch, layout.seq, layout.heads);
        let d = qv.cols();
        let dh = d / h;
        let ds = d as isize;
        let ts = t as isize;
        let scale = T::one() / T::from_count(dh).sqrt();
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let mut dp = vec![T::zero(); t * t];
        for bi in 0..b {
            for hi in 0..h {
                let off = bi * t * d + hi * dh;
                let p = &probs[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                // dP = dOut * V^T
                T::gemm(
                    t,
                    dh,
                    t,
                    T::one(),
                    (&g.data()[off..], ds, 1),
                    (&vv.data()[off..], 1, ds),
                    T::zero(),
                    (&mut dp, ts, 1),
                );
                // dV += P^T * dOut
                T::gemm(
                    t,
                    t,
                    dh,
                    T::one(),
                    (p, 1, ts),
                    (&g.data()[off..], ds, 1),
                    T::one(),
                    (&mut dv.data_mut()[off..], ds, 1),
                );
                // dS = P * (dP - rowsum(dP * P)) / sqrt(dh), in place in dp
                for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                    let dot = drow
                        .iter()
                        .zip(prow)
                        .fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (dv_, &pv) in drow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                // dQ += dS * K ; dK += dS^T * Q
                T::gemm(
                    t,
                    t,
                    dh,
                    T::one(),
                    (&dp, ts, 1),
                    (&kv.data()[off..], ds, 1),
                    T::one(),
                    (&mut dq.data_mut()[off..], ds, 1),
                );
                T::gemm(
                    t,
                    t,
                    dh,
                    T::one(),
                    (&dp, 1, ts),
                    (&qv.data()[off..], ds, 1),
                    T::one(),
                    (&mut dk.data_mut()[off..], ds, 1),
                );
            }
        }
        let mut res = Vec::with_capacity(3);
        for (id, grad) in ins.iter().zip([dq, dk, dv]) {
            if self.wants(*id) {
                res.push((*id, grad));
            }
        }
        res
    }
}

/// `0.5 * (1 + tanh(u))` with `u = c * (x + k x^3)`, evaluated as the
/// logistic `1 / (1 + exp(-2u))`.
fn gelu_gate<T: Element>(x: T, c: T, k: T) -> T {
    let u = c * (x + k * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

fn masked_softmax_in_place<T: Element>(row: &mut [T], valid: &[bool]) {
    let max = row
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .fold(T::neg_infinity(), |m, (&v, _)| m.max(v));
    let mut total = T::zero();
    for (v, &ok) in row.iter_mut().zip(valid) {
        *v = if ok { (*v - max).exp() } else { T::zero() };
        total = total + *v;
    }
    if total > T::zero() {
        row.iter_mut().for_each(|v| *v = *v / total);
    }
}

fn column_sums<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let c = g.cols();
    let mut out = vec![T::zero(); c];
    for row in g.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("column-sum shape matches")
}

/// Per-parameter gradients from one backward sweep.
///
/// A parameter that no differentiable path reached has no entry; its
/// gradient is exactly zero.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when the parameter was unreachable (or reached only through a
    /// stop-gradient).
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn is_touched(&self, id: ParamId) -> bool {
        self.get(id).is_some()
    }

    /// Gradient with unreachable parameters materialized as exact zeros.
    pub fn dense(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()))
    }

    /// Identifier to gradient for every trainable parameter.
    pub fn to_map(&self, store: &ParamStore<T>) -> HashMap<String, Tensor<T>> {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (p.name.clone(), self.dense(id, store)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, "test", t, true).unwrap();
        (s, id)
    }

    #[test]
    fn tanh_of_zero() {
        let s = ParamStore::<f32>::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::scalar(0.0));
        let y = g.tanh(x);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let s = ParamStore::<f32>::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_hand_case() {
        let s = ParamStore::<f32>::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.input(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let s = ParamStore::<f32>::new();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn square_derivative() {
        let (s, x) = store_with("x", Tensor::scalar(3.0));
        let mut g = Graph::new(&s);
        let xn = g.param(x);
        let y = g.mul(xn, xn).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn mean_rows_splits_gradient() {
        let (s, x) = store_with("x", Tensor::zeros(&[2, 3]));
        let mut g = Graph::new(&s);
        let xn = g.param(x);
        let m = g.mean_rows(xn).unwrap();
        let w = g.input(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let p = g.mul(m, w).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(
            grads.get(x).unwrap().data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn tanh_chain_matches_finite_difference_value() {
        // d/dw tanh(w * 0.5) at w = 1
        let (s, w) = store_with("w", Tensor::scalar(1.0));
        let mut g = Graph::new(&s);
        let wn = g.param(w);
        let xs = g.input(Tensor::scalar(0.5));
        let p = g.mul(wn, xs).unwrap();
        let y = g.tanh(p);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(w).unwrap().item();
        let h = 1e-4;
        let fd = ((1.0f64 + h) * 0.5).tanh() - ((1.0f64 - h) * 0.5).tanh();
        let fd = fd / (2.0 * h);
        assert!((analytic - 0.3932).abs() < 1e-4, "{analytic}");
        assert!((analytic - fd).abs() < 1e-8);
    }

    #[test]
    fn stop_gradient_is_forward_identity_and_blocks() {
        let (s, x) = store_with("x", Tensor::vector(vec![1.5, -2.25, 3.0e-7]));
        let mut g = Graph::new(&s);
        let xn = g.param(x);
        let sg = g.stop_gradient(xn);
        assert_eq!(g.value(sg), g.value(xn));
        let l = g.sum(sg);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.dense(x, &s).data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn product_with_one_detached_factor() {
        let (s, x) = store_with("x", Tensor::scalar(2.0));
        let mut g = Graph::new(&s);
        let xn = g.param(x);
        let sg = g.stop_gradient(xn);
        let y = g.mul(sg, xn).unwrap();
        assert_eq!(g.value(y).item(), 4.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let (s, x) = store_with("x", Tensor::zeros(&[2]));
        let mut g = Graph::new(&s);
        let xn = g.param(x);
        let y = g.tanh(xn);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", "t", Tensor::scalar(2.0), true).unwrap();
        let b = s
            .add("b", "t", Tensor::vector(vec![1.0, 2.0]), true)
            .unwrap();
        let mut g = Graph::new(&s);
        let an = g.param(a);
        let y = g.mul(an, an).unwrap();
        let grads = g.backward(y).unwrap();
        let map = grads.to_map(&s);
        assert_eq!(map["b"].data(), &[0.0, 0.0]);
        assert_eq!(map["a"].item(), 4.0);
        let _ = b;
    }

    #[test]
    fn masked_keys_get_zero_attention() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x =
            g.input(Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.1], vec![5.0, 5.0]]).unwrap());
        let layout = AttentionLayout {
            batch: 1,
            seq: 3,
            heads: 1,
            valid: Arc::new(vec![true, true, false]),
        };
        let y = g.attention(x, x, x, &layout).unwrap();
        let s2 = ParamStore::<f64>::new();
        let mut g2 = Graph::new(&s2);
        let x2 = g2.input(Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.1]]).unwrap());
        let layout2 = AttentionLayout {
            batch: 1,
            seq: 2,
            heads: 1,
            valid: Arc::new(vec![true, true]),
        };
        let y2 = g2.attention(x2, x2, x2, &layout2).unwrap();
        for r in 0..2 {
            for (a, b) in g.value(y).row(r).iter().zip(g2.value(y2).row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
