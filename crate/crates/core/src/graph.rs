//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it executes. Node ids are handed out
//! in execution order, so the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Every node also carries a FLOP count under a fixed convention (one
//! multiply-accumulate = 2 FLOPs, pointwise ops = 1 FLOP per output element,
//! softmax 3 per element, layer norm 5) and a [`FlopTag`] naming the part of
//! the model that issued it. Refinement traces and cost reports are built from these.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::params::ParamId;
use crate::tensor::{self, zip_broadcast, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model issued an operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopTag {
    #[default]
    Backbone,
    Projector,
    /// Matrix products that generate modulation from the context vector
    /// (FiLM γ/β generators, the merged core product).
    Generator,
    /// Everything else on the feedback path: bias adds, γ⊙h+β, gates.
    Fusion,
    Loss,
}

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    /// Global Lipschitz constant: sup |φ'|.
    pub fn lipschitz(self) -> f64 {
        match self {
            // sup of Φ(x) + xφ(x), attained at x = √2 (≈ 1.128904), rounded up
            Activation::Gelu => 1.1290,
            Activation::Tanh | Activation::Identity => 1.0,
        }
    }

    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => tensor::gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => tensor::gelu_grad(x),
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Tensor times a one-element node.
    ScaleBy(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    Act(Activation, NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    Concat(NodeId, NodeId, usize),
    Transpose(NodeId),
    RepeatRows(NodeId),
    MeanRows(NodeId),
    Sum(NodeId),
    Gather(NodeId, Vec<usize>),
    CrossEntropy(NodeId, Vec<usize>),
    SquaredError(NodeId, NodeId),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | ScaleBy(a, b) | Concat(a, b, _)
            | SquaredError(a, b) => vec![*a, *b],
            ScaleConst(a, _)
            | Act(_, a)
            | SoftmaxRows(a)
            | LayerNormRows(a, _)
            | Transpose(a)
            | RepeatRows(a)
            | MeanRows(a)
            | Sum(a)
            | Gather(a, _)
            | CrossEntropy(a, _) => vec![*a],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    flops: u64,
    tag: FlopTag,
}

/// Gradients produced by one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f64> {
    params: BTreeMap<ParamId, Tensor<T>>,
    leaves: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn leaf(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaves.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    record_grad: bool,
    consumed: bool,
    tag: FlopTag,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that tracks gradients for trainable leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record_grad: true,
            consumed: false,
            tag: FlopTag::default(),
        }
    }

    /// A graph that only evaluates; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            record_grad: false,
            ..Self::new()
        }
    }

    pub fn records_grad(&self) -> bool {
        self.record_grad
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the tag applied to subsequently recorded ops and returns the
    /// previous one.
    pub fn set_tag(&mut self, tag: FlopTag) -> FlopTag {
        std::mem::replace(&mut self.tag, tag)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Total FLOPs of nodes `start..end` (node indices).
    pub fn flops_in(&self, start: usize, end: usize) -> u64 {
        self.nodes[start..end].iter().map(|n| n.flops).sum()
    }

    pub fn flops_by_tag(&self, start: usize, end: usize) -> BTreeMap<FlopTag, u64> {
        let mut out = BTreeMap::new();
        for n in &self.nodes[start..end] {
            *out.entry(n.tag).or_insert(0) += n.flops;
        }
        out
    }

    pub fn total_flops(&self) -> u64 {
        self.flops_in(0, self.nodes.len())
    }

    fn push(&mut self, value: Tensor<T>, op: Op, flops: u64, name: &'static str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        let requires_grad =
            self.record_grad && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            flops,
            tag: self.tag,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Result<NodeId> {
        value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.record_grad && requires_grad,
            param,
            flops: 0,
            tag: self.tag,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant input (never differentiated).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, false, None)
    }

    /// A free leaf whose gradient is reported by node id.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, true, None)
    }

    /// Binds a model parameter. The stored value is double precision and is
    /// converted to this graph's scalar type.
    pub fn param(&mut self, id: ParamId, value: &Tensor<f64>, trainable: bool) -> Result<NodeId> {
        self.leaf(value.cast(), trainable, Some(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.matmul(bv)?;
        let (m, k) = av.dims2()?;
        let (_, n) = bv.dims2()?;
        self.push(out, Op::MatMul(a, b), 2 * (m * k * n) as u64, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x + y)?;
        let f = out.len() as u64;
        self.push(out, Op::Add(a, b), f, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x - y)?;
        let f = out.len() as u64;
        self.push(out, Op::Sub(a, b), f, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x * y)?;
        let f = out.len() as u64;
        self.push(out, Op::Mul(a, b), f, "mul")
    }

    /// Multiplies `a` by the single scalar held in `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let k = self.value(s).item()?;
        let out = self.value(a).map(|v| v * k);
        let f = out.len() as u64;
        self.push(out, Op::ScaleBy(a, s), f, "scale_by")
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let kk = T::from_f64(k);
        let out = self.value(a).map(|v| v * kk);
        let f = out.len() as u64;
        self.push(out, Op::ScaleConst(a, k), f, "scale")
    }

    pub fn activation(&mut self, act: Activation, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| act.apply(v));
        let f = match act {
            Activation::Identity => 0,
            _ => out.len() as u64,
        };
        self.push(out, Op::Act(act, a), f, "activation")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(Activation::Gelu, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(Activation::Tanh, a)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let out = softmax_rows(self.value(a))?;
        let f = 3 * out.len() as u64;
        self.push(out, Op::SoftmaxRows(a), f, "softmax")
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let out = layer_norm_rows(self.value(a), eps)?;
        let f = 5 * out.len() as u64;
        self.push(out, Op::LayerNormRows(a, eps), f, "layer_norm")
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let out = concat(self.value(a), self.value(b), axis)?;
        self.push(out, Op::Concat(a, b, axis), 0, "concat")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), 0, "transpose")
    }

    /// Stacks a single row `n` times.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        if r != 1 || n == 0 {
            return Err(CflError::Shape(format!("repeat_rows needs one row, got {:?}", v.shape())));
        }
        let data = v.data().repeat(n);
        let out = Tensor::matrix(n, c, data)?;
        self.push(out, Op::RepeatRows(a), 0, "repeat_rows")
    }

    /// Column means, returned as a single row.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        let mut out = vec![T::zero(); c];
        for row in v.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        let inv = T::from_f64(1.0 / r as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let f = v.len() as u64;
        let out = Tensor::matrix(1, c, out)?;
        self.push(out, Op::MeanRows(a), f, "mean_rows")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let f = v.len() as u64;
        self.push(Tensor::scalar(s), Op::Sum(a), f, "sum")
    }

    /// Row lookup: `out[i] = table[indices[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, c) = t.dims2()?;
        if indices.is_empty() {
            return Err(CflError::Shape("gather with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(CflError::Shape(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        self.push(out, Op::Gather(table, indices.to_vec()), 0, "gather")
    }

    /// Mean cross-entropy of row logits against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let (r, c) = v.dims2()?;
        if labels.len() != r {
            return Err(CflError::Length(format!("{} labels for {r} rows", labels.len())));
        }
        let mut total = 0.0;
        for (row, &y) in v.data().chunks(c).zip(labels) {
            if y >= c {
                return Err(CflError::Shape(format!("label {y} out of range for {c} classes")));
            }
            let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let lse = m + row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln();
            total += lse - row[y].as_f64();
        }
        let f = 3 * v.len() as u64;
        let out = Tensor::scalar(T::from_f64(total / r as f64));
        self.push(out, Op::CrossEntropy(logits, labels.to_vec()), f, "cross_entropy")
    }

    /// Mean over rows of the squared Euclidean distance between `pred` and
    /// `target`.
    pub fn squared_error(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(CflError::Shape(format!(
                "squared_error {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let (r, _) = p.dims2()?;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        let f = 3 * p.len() as u64;
        let out = Tensor::scalar(T::from_f64(s / r as f64));
        self.push(out, Op::SquaredError(pred, target), f, "squared_error")
    }

    /// Reverse sweep from a scalar `loss`. The graph is consumed: a second
    /// call without [`Graph::reset`] is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(CflError::GraphConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(CflError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: BTreeMap::new(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(p) = node.param {
                    out.params.insert(p, g.clone());
                }
                out.leaves.insert(NodeId(i), g);
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `i` for each parent.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    out.push((*a, g.matmul_nt(val(*b))?.reshape(val(*a).shape().to_vec())?));
                }
                if needs(*b) {
                    let (m, k) = val(*a).dims2()?;
                    let a2 = val(*a).clone().reshape(vec![m, k])?;
                    out.push((*b, a2.matmul_tn(g)?.reshape(val(*b).shape().to_vec())?));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if needs(*a) {
                    out.push((*a, g.reduce_to(val(*a).shape())?));
                }
                if needs(*b) {
                    out.push((*b, g.map(|v| v * sign).reduce_to(val(*b).shape())?));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    out.push((*a, zip_broadcast(g, bv, |x, y| x * y)?.reduce_to(av.shape())?));
                }
                if needs(*b) {
                    out.push((*b, zip_broadcast(g, av, |x, y| x * y)?.reduce_to(bv.shape())?));
                }
            }
            Op::ScaleBy(a, s) => {
                let k = val(*s).item()?;
                if needs(*a) {
                    out.push((*a, g.map(|v| v * k)));
                }
                if needs(*s) {
                    let d = tensor::dot(g.data(), val(*a).data());
                    out.push((*s, Tensor::full(val(*s).shape(), d)));
                }
            }
            Op::ScaleConst(a, k) => {
                let k = T::from_f64(*k);
                out.push((*a, g.map(|v| v * k)));
            }
            Op::Act(act, a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * act.derivative(xv))
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let s = tensor::dot(yr, gr);
                    data.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - s)));
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), data)?));
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let c = *x.shape().last().unwrap();
                let n = T::from_f64(c as f64);
                let mut data = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x.data().chunks(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let inv_std = row_inv_std(xr, *eps);
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = tensor::dot(gr, yr) / n;
                    data.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| inv_std * (gv - mg - yv * mgy)),
                    );
                }
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::Concat(a, b, axis) => {
                let (ga, gb) = split(g, val(*a).shape(), val(*b).shape(), *axis)?;
                if needs(*a) {
                    out.push((*a, ga));
                }
                if needs(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose()?.reshape(val(*a).shape().to_vec())?)),
            Op::RepeatRows(a) => out.push((*a, g.reduce_to(val(*a).shape())?)),
            Op::MeanRows(a) => {
                let x = val(*a);
                let (r, _) = x.dims2()?;
                let inv = T::from_f64(1.0 / r as f64);
                let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                let data = row.repeat(r);
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                out.push((*a, Tensor::full(val(*a).shape(), gv)));
            }
            Op::Gather(table, idx) => {
                let t = val(*table);
                let c = *t.shape().last().unwrap();
                let mut acc = Tensor::zeros(t.shape());
                for (row, &i) in g.data().chunks(c).zip(idx) {
                    let dst = &mut acc.data_mut()[i * c..(i + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                out.push((*table, acc));
            }
            Op::CrossEntropy(a, labels) => {
                let x = val(*a);
                let (r, _) = x.dims2()?;
                let p = softmax_rows(x)?;
                let c = *x.shape().last().unwrap();
                let scale = g.item()? / T::from_f64(r as f64);
                let mut data = p.into_data();
                for (row, &y) in data.chunks_mut(c).zip(labels) {
                    row[y] = row[y] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::SquaredError(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let (r, _) = pv.dims2()?;
                let k = g.item()? * T::from_f64(2.0 / r as f64);
                let diff = zip_broadcast(pv, tv, |a, b| (a - b) * k)?;
                if needs(*t) {
                    out.push((*t, diff.map(|v| -v)));
                }
                if needs(*p) {
                    out.push((*p, diff));
                }
            }
        }
        Ok(out)
    }
}

fn row_inv_std<T: Real>(row: &[T], eps: f64) -> T {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    T::from_f64(1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap();
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = data.len();
        data.extend(row.iter().map(|&v| (v - m).exp()));
        let s: T = data[start..].iter().copied().sum();
        data[start..].iter_mut().for_each(|v| *v = *v / s);
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn layer_norm_rows<T: Real>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap();
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let mean = T::from_f64(row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64);
        let inv = row_inv_std(row, eps);
        data.extend(row.iter().map(|&v| (v - mean) * inv));
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn concat_layout(a: &[usize], b: &[usize], axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
    if a.len() != b.len() || axis >= a.len() {
        return Err(CflError::Shape(format!("concat {a:?} and {b:?} on axis {axis}")));
    }
    for d in 0..a.len() {
        if d != axis && a[d] != b[d] {
            return Err(CflError::Shape(format!("concat {a:?} and {b:?} on axis {axis}")));
        }
    }
    let outer: usize = a[..axis].iter().product();
    let ai: usize = a[axis..].iter().product();
    let bi: usize = b[axis..].iter().product();
    let mut shape = a.to_vec();
    shape[axis] += b[axis];
    Ok((outer, ai, bi, shape))
}

pub(crate) fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, ai, bi, shape) = concat_layout(a.shape(), b.shape(), axis)?;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * ai..(o + 1) * ai]);
        data.extend_from_slice(&b.data()[o * bi..(o + 1) * bi]);
    }
    Tensor::new(shape, data)
}

fn split<T: Real>(g: &Tensor<T>, a: &[usize], b: &[usize], axis: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (outer, ai, bi, _) = concat_layout(a, b, axis)?;
    let mut da = Vec::with_capacity(outer * ai);
    let mut db = Vec::with_capacity(outer * bi);
    for chunk in g.data().chunks(ai + bi) {
        da.extend_from_slice(&chunk[..ai]);
        db.extend_from_slice(&chunk[ai..]);
    }
    Ok((Tensor::new(a.to_vec(), da)?, Tensor::new(b.to_vec(), db)?))
}
