use super::{split_axis, GradBuf, Op};
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Node, Tape, Var};
use crate::tensor::numel;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with shape `shape`) into the layout given by `axes`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let s = step[last];
        for i in 0..out_shape[last] {
            out.push(src[base + i * s]);
        }
        // advance the odometer over all but the innermost axis
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn check_axes(op: &'static str, rank: usize, axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(TensorError::InvalidShape {
            op,
            shape: axes.to_vec(),
            reason: format!("expected a permutation of {rank} axes"),
        });
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(TensorError::InvalidShape {
                op,
                shape: axes.to_vec(),
                reason: format!("not a permutation of {rank} axes"),
            });
        }
        seen[a] = true;
    }
    Ok(())
}

impl<'t, T: Float> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let (old, value) = self
            .tape
            .with_nodes(|n| (n[self.id].shape.clone(), n[self.id].value.clone()));
        if numel(&old) != numel(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id)))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let (shape, value) = self.tape.with_nodes(|n| {
            let node = &n[self.id];
            check_axes("permute", node.shape.len(), axes)?;
            let shape: Vec<usize> = axes.iter().map(|&a| node.shape[a]).collect();
            Ok::<_, TensorError>((shape, permute_data(&node.value, &node.shape, axes)))
        })?;
        Ok(self
            .tape
            .push(shape, value, Op::Permute(self.id, axes.to_vec())))
    }

    /// Swaps two axes.
    pub fn transpose(self, a0: usize, a1: usize) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        for a in [a0, a1] {
            if a >= rank {
                return Err(TensorError::InvalidAxis {
                    op: "transpose",
                    axis: a,
                    rank,
                });
            }
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a0, a1);
        self.permute(&axes)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let (shape, value) = self.tape.with_nodes(|n| {
            let node = &n[self.id];
            let rank = node.shape.len();
            if axis >= rank {
                return Err(TensorError::InvalidAxis {
                    op: "slice",
                    axis,
                    rank,
                });
            }
            if start > end || end > node.shape[axis] {
                return Err(TensorError::InvalidShape {
                    op: "slice",
                    shape: node.shape.clone(),
                    reason: format!("range {start}..{end} on axis {axis}"),
                });
            }
            let (outer, extent, inner) = split_axis(&node.shape, axis);
            let len = end - start;
            let mut value = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * extent * inner + start * inner;
                value.extend_from_slice(&node.value[base..base + len * inner]);
            }
            let mut shape = node.shape.clone();
            shape[axis] = len;
            Ok((shape, value))
        })?;
        Ok(self.tape.push(
            shape,
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }
}

pub(crate) fn concat<'t, T: Float>(
    tape: &'t Tape<T>,
    parts: &[Var<'_, T>],
    axis: usize,
) -> Result<Var<'t, T>> {
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let (shape, value) = tape.with_nodes(|nodes| {
        let Some(&first) = ids.first() else {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: Vec::new(),
                reason: "no inputs".into(),
            });
        };
        let base = &nodes[first].shape;
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &id in &ids {
            let s = &nodes[id].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &id in &ids {
                let n = &nodes[id];
                let block = n.shape[axis] * inner;
                value.extend_from_slice(&n.value[o * block..(o + 1) * block]);
            }
        }
        Ok((shape, value))
    })?;
    Ok(tape.push(shape, value, Op::Concat(ids, axis)))
}

pub(crate) fn backward_permute<T: Float>(
    nodes: &[Node<T>],
    a: usize,
    axes: &[usize],
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    if !grads.needs(a) {
        return;
    }
    let mut inverse = vec![0; axes.len()];
    for (d, &ax) in axes.iter().enumerate() {
        inverse[ax] = d;
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| nodes[a].shape[ax]).collect();
    grads.accumulate(a, permute_data(g, &out_shape, &inverse));
}

pub(crate) fn backward_concat<T: Float>(
    nodes: &[Node<T>],
    parts: &[usize],
    axis: usize,
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    let shape0 = &nodes[parts[0]].shape;
    let inner: usize = shape0[axis + 1..].iter().product();
    let outer: usize = shape0[..axis].iter().product();
    let total: usize = parts.iter().map(|&p| nodes[p].shape[axis]).sum();
    let mut offset = 0;
    for &p in parts {
        let len = nodes[p].shape[axis];
        if let Some(buf) = grads.slot(p) {
            let block = len * inner;
            for o in 0..outer {
                let src = o * total * inner + offset * inner;
                buf[o * block..(o + 1) * block]
                    .iter_mut()
                    .zip(&g[src..src + block])
                    .for_each(|(b, &x)| *b += x);
            }
        }
        offset += len;
    }
}

pub(crate) fn backward_slice<T: Float>(
    nodes: &[Node<T>],
    node: &Node<T>,
    input: usize,
    axis: usize,
    start: usize,
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    let in_shape = &nodes[input].shape;
    let (outer, extent, inner) = split_axis(in_shape, axis);
    let len = node.shape[axis];
    if let Some(buf) = grads.slot(input) {
        for o in 0..outer {
            let dst = o * extent * inner + start * inner;
            let src = o * len * inner;
            buf[dst..dst + len * inner]
                .iter_mut()
                .zip(&g[src..src + len * inner])
                .for_each(|(b, &x)| *b += x);
        }
    }
}
