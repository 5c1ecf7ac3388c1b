//! Recorded computation graph with lazy forward evaluation and reverse-mode
//! gradient accumulation.
//!
//! Nodes are appended in construction order, so every input id is smaller
//! than the id of its consumer and the node list is already topologically
//! sorted. [`Graph::forward`] evaluates every non-leaf node in order and caches
//! the activations that [`Graph::backward`] needs. Leaf gradients accumulate
//! additively across backward calls until [`Graph::zero_grad`] is called.

use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::kernels::{axpy, dot, gemm, softmax_in_place};
use crate::tensor::Tensor;

/// Epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch * q_len, width]`, keys and values are
/// `[batch * kv_len, width]`; `width` is split evenly across `heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    /// Query `i` only sees keys `j <= i`.
    pub causal: bool,
    /// Per key position validity, `batch * kv_len` entries. `None` means all valid.
    pub key_valid: Option<Vec<bool>>,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        self.key_valid
            .as_ref()
            .is_none_or(|valid| valid[b * self.kv_len + j])
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Element = f32>: Send {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradient with respect to each input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_output: &[T]) -> Vec<Vec<T>>;
}

enum Op<T: Element> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::Relu(x) | Op::Softmax(x) | Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

/// Activations kept from forward for use in backward.
enum Cache<T> {
    None,
    /// Per-row inverse standard deviation and the normalized input.
    LayerNorm { rstd: Vec<T>, normalized: Vec<T> },
    /// Attention probabilities laid out `[batch, heads, q_len, kv_len]`.
    Attention { probs: Vec<T> },
    /// Softmax of the logits and the number of counted targets.
    CrossEntropy { probs: Vec<T>, count: usize },
}

struct Node<T: Element> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    cache: Cache<T>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    evaluated: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            evaluated: false,
        }
    }
}

fn mismatch(node: usize, op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { node, op, detail }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        self.evaluated = false;
        self.nodes.push(Node {
            op,
            value: None,
            cache: Cache::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a materialized input. Its `requires_grad` flag decides whether
    /// backward populates its gradient.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf);
        self.nodes[id.0].value = Some(tensor);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Adds a vector `b` to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    /// Gathers rows of `table` (shape `[vocab, width]`).
    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Embedding { table, ids })
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttentionSpec) -> NodeId {
        self.push(Op::Attention { q, k, v, spec })
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> NodeId {
        self.push(Op::CrossEntropy { logits, targets })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn custom(&mut self, inputs: Vec<NodeId>, op: Box<dyn CustomOp<T>>) -> NodeId {
        self.push(Op::Custom { inputs, op })
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.value(id).and_then(Tensor::grad)
    }

    /// Mutable access to a leaf tensor. Marks the graph as needing a new forward.
    pub fn leaf_mut(&mut self, id: NodeId) -> Result<&mut Tensor<T>> {
        let node = self.nodes.get_mut(id.0).ok_or(AutodiffError::NotLeaf(id.0))?;
        if !matches!(node.op, Op::Leaf) {
            return Err(AutodiffError::NotLeaf(id.0));
        }
        self.evaluated = false;
        Ok(node.value.as_mut().expect("leaves are always materialized"))
    }

    /// Ids of every leaf with `requires_grad` set.
    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                matches!(n.op, Op::Leaf) && n.value.as_ref().is_some_and(Tensor::requires_grad)
            })
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) {
                if let Some(v) = node.value.as_mut() {
                    v.zero_grad();
                }
            }
        }
    }

    pub fn output(&self) -> Option<&Tensor<T>> {
        if !self.evaluated {
            return None;
        }
        self.nodes.last().and_then(|n| n.value.as_ref())
    }

    /// Evaluates every node and returns the final node's value.
    pub fn forward(&mut self) -> Result<&Tensor<T>> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyGraph);
        }
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let (value, cache) = self.eval_node(idx)?;
            if !value.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: idx,
                    op: self.nodes[idx].op.name(),
                });
            }
            let node = &mut self.nodes[idx];
            node.value = Some(value);
            node.cache = cache;
        }
        self.evaluated = true;
        Ok(self.nodes.last().and_then(|n| n.value.as_ref()).expect("evaluated"))
    }

    fn input(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs precede their consumers")
    }

    fn eval_node(&self, idx: usize) -> Result<(Tensor<T>, Cache<T>)> {
        let node = &self.nodes[idx];
        let name = node.op.name();
        let err = |detail: String| mismatch(idx, name, detail);
        let out = match &node.op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.input(*a), self.input(*b));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(err(format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut c = vec![T::zero(); m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
                (Tensor::new(&[m, n], c)?, Cache::None)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.input(*a), self.input(*b));
                if a.shape() != b.shape() {
                    return Err(err(format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let f: fn(T, T) -> T = match node.op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (Tensor::new(a.shape(), data)?, Cache::None)
            }
            Op::AddBias(x, b) => {
                let (x, b) = (self.input(*x), self.input(*b));
                let (_, cols) = x.rows_cols();
                if b.numel() != cols {
                    return Err(err(format!("bias {:?} for rows of width {cols}", b.shape())));
                }
                let mut data = x.data().to_vec();
                for row in data.chunks_mut(cols) {
                    row.iter_mut().zip(b.data()).for_each(|(v, &b)| *v = *v + b);
                }
                (Tensor::new(x.shape(), data)?, Cache::None)
            }
            Op::Scale(x, c) => {
                let x = self.input(*x);
                let c = T::from_f64(*c);
                let data = x.data().iter().map(|&v| v * c).collect();
                (Tensor::new(x.shape(), data)?, Cache::None)
            }
            Op::Relu(x) => {
                let x = self.input(*x);
                let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
                (Tensor::new(x.shape(), data)?, Cache::None)
            }
            Op::Softmax(x) => {
                let x = self.input(*x);
                let (_, cols) = x.rows_cols();
                let mut data = x.data().to_vec();
                data.chunks_mut(cols).for_each(softmax_in_place);
                (Tensor::new(x.shape(), data)?, Cache::None)
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, g, b) = (self.input(*x), self.input(*gamma), self.input(*beta));
                let (rows, cols) = x.rows_cols();
                if g.numel() != cols || b.numel() != cols {
                    return Err(err(format!(
                        "gamma {:?} / beta {:?} for width {cols}",
                        g.shape(),
                        b.shape()
                    )));
                }
                let mut normalized = vec![T::zero(); x.numel()];
                let mut rstd = vec![T::zero(); rows];
                let mut out = vec![T::zero(); x.numel()];
                for r in 0..rows {
                    let row = x.row(r);
                    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    rstd[r] = T::from_f64(inv);
                    for c in 0..cols {
                        let n = T::from_f64((row[c].as_f64() - mean) * inv);
                        normalized[r * cols + c] = n;
                        out[r * cols + c] = n * g.data()[c] + b.data()[c];
                    }
                }
                (
                    Tensor::new(x.shape(), out)?,
                    Cache::LayerNorm { rstd, normalized },
                )
            }
            Op::Embedding { table, ids } => {
                let table = self.input(*table);
                if table.shape().len() != 2 {
                    return Err(err(format!("table shape {:?}", table.shape())));
                }
                let (vocab, width) = (table.shape()[0], table.shape()[1]);
                if ids.is_empty() {
                    return Err(err("no ids".into()));
                }
                let mut data = Vec::with_capacity(ids.len() * width);
                for &id in ids {
                    if id >= vocab {
                        return Err(err(format!("id {id} outside vocabulary of {vocab}")));
                    }
                    data.extend_from_slice(table.row(id));
                }
                (Tensor::new(&[ids.len(), width], data)?, Cache::None)
            }
            Op::Attention { q, k, v, spec } => {
                let (q, k, v) = (self.input(*q), self.input(*k), self.input(*v));
                check_attention(spec, q, k, v).map_err(err)?;
                let (out, probs) = attention_forward(spec, q, k, v);
                (Tensor::new(q.shape(), out)?, Cache::Attention { probs })
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = self.input(*logits);
                let (rows, cols) = logits.rows_cols();
                if targets.len() != rows {
                    return Err(err(format!("{} targets for {rows} rows", targets.len())));
                }
                let mut probs = logits.data().to_vec();
                let mut total = 0.0f64;
                let mut count = 0usize;
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    if t >= cols {
                        return Err(err(format!("target {t} outside {cols} classes")));
                    }
                    let row = logits.row(r);
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
                    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
                    total += lse - row[t].as_f64();
                    count += 1;
                    softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
                }
                let loss = if count == 0 { 0.0 } else { total / count as f64 };
                (
                    Tensor::scalar(T::from_f64(loss)),
                    Cache::CrossEntropy { probs, count },
                )
            }
            Op::Sum(x) => {
                let x = self.input(*x);
                let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
                (Tensor::scalar(T::from_f64(s)), Cache::None)
            }
            Op::Mean(x) => {
                let x = self.input(*x);
                let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
                (Tensor::scalar(T::from_f64(s / x.numel() as f64)), Cache::None)
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.input(i)).collect();
                (op.forward(&ins)?, Cache::None)
            }
        };
        Ok(out)
    }

    /// Propagates `seed` (the gradient of some scalar with respect to the
    /// output node) back to every leaf with `requires_grad`.
    pub fn backward(&mut self, seed: &Tensor<T>) -> Result<()> {
        if !self.evaluated {
            return Err(AutodiffError::NotEvaluated);
        }
        let last = self.nodes.len() - 1;
        let out_shape = self.nodes[last].value.as_ref().expect("evaluated").shape();
        if seed.shape() != out_shape {
            return Err(AutodiffError::SeedShape {
                expected: out_shape.to_vec(),
                got: seed.shape().to_vec(),
            });
        }

        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Leaf => node.value.as_ref().is_some_and(Tensor::requires_grad),
                op => op.inputs().iter().any(|j| needs[j.0]),
            };
        }
        if !needs[last] {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[last] = Some(seed.data().to_vec());
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.as_mut().expect("leaf").accumulate_grad(&g);
                continue;
            }
            for (input, input_grad) in self.node_backward(idx, &g, &needs) {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&input_grad).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(input_grad),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &[T], needs: &[bool]) -> Vec<(NodeId, Vec<T>)> {
        let node = &self.nodes[idx];
        let out = node.value.as_ref().expect("evaluated");
        let mut result = Vec::new();
        let want = |id: &NodeId| needs[id.0];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.input(*a), self.input(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if want(a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, bt.data(), true, &mut ga, false);
                    result.push((*a, ga));
                }
                if want(b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, at.data(), true, g, false, &mut gb, false);
                    result.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    result.push((*a, g.to_vec()));
                }
                if want(b) {
                    result.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    result.push((*a, g.to_vec()));
                }
                if want(b) {
                    result.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.input(*a), self.input(*b));
                if want(a) {
                    result.push((*a, g.iter().zip(bt.data()).map(|(&g, &y)| g * y).collect()));
                }
                if want(b) {
                    result.push((*b, g.iter().zip(at.data()).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::AddBias(x, b) => {
                if want(x) {
                    result.push((*x, g.to_vec()));
                }
                if want(b) {
                    let cols = self.input(*b).numel();
                    let mut gb = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    result.push((*b, gb));
                }
            }
            Op::Scale(x, c) => {
                if want(x) {
                    let c = T::from_f64(*c);
                    result.push((*x, g.iter().map(|&v| v * c).collect()));
                }
            }
            Op::Relu(x) => {
                if want(x) {
                    let xt = self.input(*x);
                    let gx = g
                        .iter()
                        .zip(xt.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    result.push((*x, gx));
                }
            }
            Op::Softmax(x) => {
                if want(x) {
                    let (_, cols) = out.rows_cols();
                    let mut gx = vec![T::zero(); g.len()];
                    for ((gr, yr), dst) in g.chunks(cols).zip(out.data().chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let inner = dot(gr, yr);
                        for c in 0..cols {
                            dst[c] = yr[c] * (gr[c] - inner);
                        }
                    }
                    result.push((*x, gx));
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let Cache::LayerNorm { rstd, normalized } = &node.cache else {
                    unreachable!("layer norm cache")
                };
                let gt = self.input(*gamma);
                let cols = gt.numel();
                if want(x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, inv) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let gr = &g[span.clone()];
                        let nr = &normalized[span.clone()];
                        let dn: Vec<f64> = gr.iter().zip(gt.data()).map(|(&a, &b)| (a * b).as_f64()).collect();
                        let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b.as_f64()).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] =
                                T::from_f64(inv.as_f64() * (dn[c] - mean_dn - nr[c].as_f64() * mean_dn_n));
                        }
                    }
                    result.push((*x, gx));
                }
                if want(gamma) {
                    let mut gg = vec![T::zero(); cols];
                    for (gr, nr) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] = gg[c] + gr[c] * nr[c];
                        }
                    }
                    result.push((*gamma, gg));
                }
                if want(beta) {
                    let mut gb = vec![T::zero(); cols];
                    for gr in g.chunks(cols) {
                        gb.iter_mut().zip(gr).for_each(|(a, &v)| *a = *a + v);
                    }
                    result.push((*beta, gb));
                }
            }
            Op::Embedding { table, ids } => {
                if want(table) {
                    let tt = self.input(*table);
                    let width = tt.shape()[1];
                    let mut gt = vec![T::zero(); tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * width..(r + 1) * width], &mut gt[id * width..(id + 1) * width]);
                    }
                    result.push((*table, gt));
                }
            }
            Op::Attention { q, k, v, spec } => {
                let Cache::Attention { probs } = &node.cache else {
                    unreachable!("attention cache")
                };
                let (gq, gk, gv) =
                    attention_backward(spec, self.input(*q), self.input(*k), self.input(*v), probs, g);
                if want(q) {
                    result.push((*q, gq));
                }
                if want(k) {
                    result.push((*k, gk));
                }
                if want(v) {
                    result.push((*v, gv));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let Cache::CrossEntropy { probs, count } = &node.cache else {
                    unreachable!("cross entropy cache")
                };
                if want(logits) {
                    let cols = self.input(*logits).rows_cols().1;
                    let mut gl = vec![T::zero(); probs.len()];
                    if *count > 0 {
                        let scale = g[0] / T::from_f64(*count as f64);
                        for (r, target) in targets.iter().enumerate() {
                            let Some(t) = *target else { continue };
                            let row = &mut gl[r * cols..(r + 1) * cols];
                            row.copy_from_slice(&probs[r * cols..(r + 1) * cols]);
                            row[t] = row[t] - T::one();
                            row.iter_mut().for_each(|v| *v = *v * scale);
                        }
                    }
                    result.push((*logits, gl));
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    result.push((*x, vec![g[0]; self.input(*x).numel()]));
                }
            }
            Op::Mean(x) => {
                if want(x) {
                    let n = self.input(*x).numel();
                    result.push((*x, vec![g[0] / T::from_f64(n as f64); n]));
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.input(i)).collect();
                let grads = op.backward(&ins, out, g);
                for (id, gi) in inputs.iter().zip(grads) {
                    if want(id) {
                        result.push((*id, gi));
                    }
                }
            }
        }
        result
    }
}

fn check_attention<T: Element>(spec: &AttentionSpec, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> std::result::Result<(), String> {
    let (qr, width) = q.rows_cols();
    let (kr, kw) = k.rows_cols();
    let (vr, vw) = v.rows_cols();
    if spec.heads == 0 || width % spec.heads != 0 {
        return Err(format!("width {width} not divisible by {} heads", spec.heads));
    }
    if qr != spec.batch * spec.q_len || kr != spec.batch * spec.kv_len || vr != kr {
        return Err(format!(
            "rows q={qr} k={kr} v={vr} for batch {} q_len {} kv_len {}",
            spec.batch, spec.q_len, spec.kv_len
        ));
    }
    if kw != width || vw != width {
        return Err(format!("widths q={width} k={kw} v={vw}"));
    }
    if let Some(valid) = &spec.key_valid {
        if valid.len() != kr {
            return Err(format!("{} key flags for {kr} keys", valid.len()));
        }
    }
    if spec.causal && spec.q_len != spec.kv_len {
        return Err("causal attention needs q_len == kv_len".into());
    }
    Ok(())
}

fn attention_forward<T: Element>(spec: &AttentionSpec, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let width = q.rows_cols().1;
    let dh = width / spec.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (tq, tk) = (spec.q_len, spec.kv_len);
    let mut out = vec![T::zero(); q.numel()];
    let mut probs = vec![T::zero(); spec.batch * spec.heads * tq * tk];
    let mut scores = vec![T::zero(); tk];
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let qi = &q.row(b * tq + i)[cols.clone()];
                let mut any = false;
                for (j, s) in scores.iter_mut().enumerate() {
                    if spec.allowed(b, i, j) {
                        *s = dot(qi, &k.row(b * tk + j)[cols.clone()]) * scale;
                        any = true;
                    } else {
                        *s = T::neg_infinity();
                    }
                }
                if !any {
                    continue;
                }
                softmax_in_place(&mut scores);
                let p = &mut probs[((b * spec.heads + h) * tq + i) * tk..][..tk];
                p.copy_from_slice(&scores);
                let dst = &mut out[(b * tq + i) * width..][cols.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    if pj != T::zero() {
                        axpy(pj, &v.row(b * tk + j)[cols.clone()], dst);
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<T: Element>(
    spec: &AttentionSpec,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let width = q.rows_cols().1;
    let dh = width / spec.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (tq, tk) = (spec.q_len, spec.kv_len);
    let mut gq = vec![T::zero(); q.numel()];
    let mut gk = vec![T::zero(); k.numel()];
    let mut gv = vec![T::zero(); v.numel()];
    let mut dscore = vec![T::zero(); tk];
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let p = &probs[((b * spec.heads + h) * tq + i) * tk..][..tk];
                let go = &g[(b * tq + i) * width..][cols.clone()];
                let mut inner = T::zero();
                for j in 0..tk {
                    if p[j] == T::zero() {
                        dscore[j] = T::zero();
                        continue;
                    }
                    axpy(p[j], go, &mut gv[(b * tk + j) * width..][cols.clone()]);
                    let dp = dot(go, &v.row(b * tk + j)[cols.clone()]);
                    dscore[j] = dp;
                    inner = inner + p[j] * dp;
                }
                for j in 0..tk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dscore[j] - inner) * scale;
                    let kj = &k.row(b * tk + j)[cols.clone()];
                    axpy(ds, kj, &mut gq[(b * tq + i) * width..][cols.clone()]);
                    let qi = &q.row(b * tq + i)[cols.clone()];
                    axpy(ds, qi, &mut gk[(b * tk + j) * width..][cols.clone()]);
                }
            }
        }
    }
    (gq, gk, gv)
}
