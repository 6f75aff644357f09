use super::{split_axis, GradBuf, Op};
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Node, Var};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

pub(crate) fn softmax_rows<T: Float>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let (shape, value) = self.tape.with_nodes(|n| {
            let node = &n[self.id];
            check_axis("softmax", &node.shape, axis)?;
            let (outer, extent, inner) = split_axis(&node.shape, axis);
            let mut value = node.value.clone();
            let mut row = vec![T::zero(); extent];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * extent * inner + i;
                    for (e, r) in row.iter_mut().enumerate() {
                        *r = value[base + e * inner];
                    }
                    softmax_rows(&mut row);
                    for (e, r) in row.iter().enumerate() {
                        value[base + e * inner] = *r;
                    }
                }
            }
            Ok::<_, TensorError>((node.shape.clone(), value))
        })?;
        Ok(self.tape.push(shape, value, Op::Softmax(self.id, axis)))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let total = self
            .tape
            .with_nodes(|n| n[self.id].value.iter().copied().sum::<T>());
        self.tape.push(Vec::new(), vec![total], Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let mean = self.tape.with_nodes(|n| {
            let v = &n[self.id].value;
            v.iter().copied().sum::<T>() / T::from_f64(v.len().max(1) as f64)
        });
        self.tape.push(Vec::new(), vec![mean], Op::MeanAll(self.id))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let name = if mean { "mean" } else { "sum" };
        let (shape, value) = self.tape.with_nodes(|n| {
            let node = &n[self.id];
            check_axis(name, &node.shape, axis)?;
            let (outer, extent, inner) = split_axis(&node.shape, axis);
            let mut value = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for e in 0..extent {
                    let src = &node.value[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                    value[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d += s);
                }
            }
            if mean {
                let scale = T::one() / T::from_f64(extent.max(1) as f64);
                value.iter_mut().for_each(|v| *v *= scale);
            }
            let mut shape = node.shape.clone();
            shape.remove(axis);
            Ok::<_, TensorError>((shape, value))
        })?;
        let op = if mean {
            Op::Mean(self.id, axis)
        } else {
            Op::Sum(self.id, axis)
        };
        Ok(self.tape.push(shape, value, op))
    }
}

pub(crate) fn backward_softmax<T: Float>(
    nodes: &[Node<T>],
    node: &Node<T>,
    a: usize,
    axis: usize,
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    if !grads.needs(a) {
        return;
    }
    let (outer, extent, inner) = split_axis(&nodes[a].shape, axis);
    let y = &node.value;
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let dot: T = (0..extent)
                .map(|e| g[base + e * inner] * y[base + e * inner])
                .sum();
            for e in 0..extent {
                let idx = base + e * inner;
                out[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    grads.accumulate(a, out);
}

pub(crate) fn backward_sum<T: Float>(
    nodes: &[Node<T>],
    a: usize,
    axis: usize,
    g: &[T],
    mean: bool,
    grads: &mut GradBuf<T>,
) {
    if !grads.needs(a) {
        return;
    }
    let (outer, extent, inner) = split_axis(&nodes[a].shape, axis);
    let scale = if mean {
        T::one() / T::from_f64(extent.max(1) as f64)
    } else {
        T::one()
    };
    let mut out = vec![T::zero(); outer * extent * inner];
    for o in 0..outer {
        for e in 0..extent {
            let dst = (o * extent + e) * inner;
            for i in 0..inner {
                out[dst + i] = g[o * inner + i] * scale;
            }
        }
    }
    grads.accumulate(a, out);
}
