//! Differentiable operations. Each submodule defines the forward methods on
//! [`Var`](crate::Var) together with the matching backward rules.

pub(crate) mod elementwise;
pub(crate) mod nn;
pub(crate) mod reduce;
pub(crate) mod shape;

use crate::float::Float;
use crate::tape::Node;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Gelu,
    Sqrt,
    Log,
    Exp,
    Silu,
    Softplus,
    Tanh,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(usize, Unary),
    Huber(usize, T),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Softmax(usize, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    LayerNorm {
        input: usize,
        rstd: Vec<T>,
    },
    NormalizeLast {
        input: usize,
        norms: Vec<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    pub fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(a, _)
            | Op::Huber(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Softmax(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::Slice { input, .. }
            | Op::LayerNorm { input, .. }
            | Op::NormalizeLast { input, .. } => vec![*input],
            Op::Concat(parts, _) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

/// Per-node gradient accumulators, allocated lazily and only for nodes that
/// lead to a trainable leaf.
pub(crate) struct GradBuf<T> {
    bufs: Vec<Option<Vec<T>>>,
    needed: Vec<bool>,
    lens: Vec<usize>,
}

impl<T: Float> GradBuf<T> {
    pub fn new(nodes: &[Node<T>]) -> Self {
        Self {
            bufs: (0..nodes.len()).map(|_| None).collect(),
            needed: nodes.iter().map(|n| n.requires_grad).collect(),
            lens: nodes.iter().map(|n| n.value.len()).collect(),
        }
    }

    pub fn needs(&self, id: usize) -> bool {
        self.needed[id]
    }

    pub fn take(&mut self, id: usize) -> Option<Vec<T>> {
        self.bufs[id].take()
    }

    pub fn accumulate(&mut self, id: usize, g: Vec<T>) {
        if !self.needed[id] {
            return;
        }
        debug_assert_eq!(g.len(), self.lens[id]);
        match &mut self.bufs[id] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &x)| *b += x),
            slot @ None => *slot = Some(g),
        }
    }

    /// Zero-initialized (or existing) accumulator for in-place updates.
    pub fn slot(&mut self, id: usize) -> Option<&mut Vec<T>> {
        if !self.needed[id] {
            return None;
        }
        let len = self.lens[id];
        Some(self.bufs[id].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

pub(crate) fn backward<T: Float>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut GradBuf<T>) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(..) | Op::Sub(..) | Op::Mul(..) | Op::Scale(..) | Op::AddScalar(..) => {
            elementwise::backward_binary(nodes, node, g, grads)
        }
        Op::Unary(a, kind) => elementwise::backward_unary(nodes, node, *a, *kind, g, grads),
        Op::Huber(a, delta) => elementwise::backward_huber(nodes, *a, *delta, g, grads),
        Op::MatMul(a, b) => nn::backward_matmul(nodes, *a, *b, g, grads),
        Op::Reshape(a) => grads.accumulate(*a, g.to_vec()),
        Op::Permute(a, axes) => shape::backward_permute(nodes, *a, axes, g, grads),
        Op::Concat(parts, axis) => shape::backward_concat(nodes, parts, *axis, g, grads),
        Op::Slice { input, axis, start } => {
            shape::backward_slice(nodes, node, *input, *axis, *start, g, grads)
        }
        Op::Softmax(a, axis) => reduce::backward_softmax(nodes, node, *a, *axis, g, grads),
        Op::Sum(a, axis) => reduce::backward_sum(nodes, *a, *axis, g, false, grads),
        Op::Mean(a, axis) => reduce::backward_sum(nodes, *a, *axis, g, true, grads),
        Op::SumAll(a) => grads.accumulate(*a, vec![g[0]; nodes[*a].value.len()]),
        Op::MeanAll(a) => {
            let n = nodes[*a].value.len();
            let v = g[0] / T::from_f64(n.max(1) as f64);
            grads.accumulate(*a, vec![v; n]);
        }
        Op::LayerNorm { input, rstd } => nn::backward_layernorm(node, *input, rstd, g, grads),
        Op::NormalizeLast { input, norms } => {
            nn::backward_normalize(node, *input, norms, g, grads)
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => nn::backward_attention(nodes, [*q, *k, *v], *heads, probs, g, grads),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
