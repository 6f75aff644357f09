use super::reduce::softmax_rows;
use super::{GradBuf, Op};
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::kernels::{for_each_chunk, for_each_chunk2, for_each_chunk3, gemm, gemm_rows, MatRef};
use crate::tape::{Node, Var};
use crate::tensor::Tensor;

/// Leading-dimension layout of a matmul.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let lead_a = &a[..a.len() - 2];
    let batch = lead_a.iter().product();
    let shared_rhs = b.len() == 2;
    if !shared_rhs && lead_a != &b[..b.len() - 2] {
        return Err(mismatch());
    }
    Ok(MatMulDims {
        batch,
        m,
        k,
        n,
        shared_rhs,
    })
}

impl<'t, T: Float> Var<'t, T> {
    /// Matrix product over the last two axes. The right operand is either a
    /// single `k x n` matrix shared by every leading index, or has the same
    /// leading axes as `self`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = self.tape.with_nodes(|nodes| {
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let d = matmul_dims(&a.shape, &b.shape)?;
            let mut out = vec![T::zero(); d.batch * d.m * d.n];
            if d.shared_rhs {
                let bv = MatRef::row_major(&b.value, d.k, d.n);
                gemm_rows(&a.value, d.batch * d.m, d.k, bv, &mut out);
            } else {
                for_each_chunk(&mut out, d.m * d.n, |i, c| {
                    let av = MatRef {
                        offset: i * d.m * d.k,
                        ..MatRef::row_major(&a.value, d.m, d.k)
                    };
                    let bv = MatRef {
                        offset: i * d.k * d.n,
                        ..MatRef::row_major(&b.value, d.k, d.n)
                    };
                    gemm(T::one(), av, bv, T::zero(), c, 0, d.n);
                });
            }
            let mut shape = a.shape.clone();
            let r = shape.len();
            shape[r - 1] = d.n;
            Ok::<_, TensorError>((shape, out))
        })?;
        Ok(self.tape.push(shape, value, Op::MatMul(self.id, other.id)))
    }

    /// Normalizes each row of the last axis to zero mean and unit (biased)
    /// variance, with `eps` added under the square root. No learned affine.
    pub fn layernorm_noaffine(self, eps: T) -> Result<Var<'t, T>> {
        let (shape, value, rstd) = self.tape.with_nodes(|nodes| {
            let node = &nodes[self.id];
            let d = *node.shape.last().unwrap_or(&0);
            if d < 2 {
                return Err(TensorError::InvalidShape {
                    op: "layernorm",
                    shape: node.shape.clone(),
                    reason: "last axis must have at least 2 elements".into(),
                });
            }
            let inv_d = T::one() / T::from_f64(d as f64);
            let mut value = node.value.clone();
            let mut rstd = Vec::with_capacity(value.len() / d);
            for row in value.chunks_mut(d) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
                let r = T::one() / (var + eps).sqrt();
                row.iter_mut().for_each(|x| *x = (*x - mean) * r);
                rstd.push(r);
            }
            Ok((node.shape.clone(), value, rstd))
        })?;
        Ok(self.tape.push(
            shape,
            value,
            Op::LayerNorm {
                input: self.id,
                rstd,
            },
        ))
    }

    /// Scales each row of the last axis to unit length: `x / sqrt(|x|^2 + eps)`.
    pub fn normalize_last(self, eps: T) -> Result<Var<'t, T>> {
        let (shape, value, norms) = self.tape.with_nodes(|nodes| {
            let node = &nodes[self.id];
            let Some(&d) = node.shape.last() else {
                return Err(TensorError::InvalidShape {
                    op: "normalize_last",
                    shape: node.shape.clone(),
                    reason: "needs rank >= 1".into(),
                });
            };
            let mut value = node.value.clone();
            let mut norms = Vec::new();
            for row in value.chunks_mut(d.max(1)) {
                let n = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
                row.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            }
            Ok((node.shape.clone(), value, norms))
        })?;
        Ok(self.tape.push(
            shape,
            value,
            Op::NormalizeLast {
                input: self.id,
                norms,
            },
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `self` is the query `[.., Tq, D]`; `k` and `v` are `[.., Tk, D]` with the
    /// same leading axes. `D` is split into `heads` contiguous groups. `mask`
    /// is an optional additive `[Tq, Tk]` bias shared by every batch entry and
    /// head; every query row must keep at least one finite entry.
    pub fn attention(
        self,
        k: Var<'t, T>,
        v: Var<'t, T>,
        heads: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        let (shape, value, probs) = self.tape.with_nodes(|nodes| {
            let (qn, kn, vn) = (&nodes[self.id], &nodes[k.id], &nodes[v.id]);
            let dims = attention_dims(&qn.shape, &kn.shape, &vn.shape, heads)?;
            let AttnDims { batch, tq, tk, d, dh } = dims;
            if let Some(m) = mask {
                if m.shape() != [tq, tk] {
                    return Err(TensorError::ShapeMismatch {
                        op: "attention mask",
                        lhs: vec![tq, tk],
                        rhs: m.shape().to_vec(),
                    });
                }
            }
            let scale = T::one() / T::from_f64(dh as f64).sqrt();
            let mut out = vec![T::zero(); batch * tq * d];
            let mut probs = vec![T::zero(); batch * heads * tq * tk];
            for_each_chunk2(&mut out, tq * d, &mut probs, heads * tq * tk, |b, o, p| {
                for h in 0..heads {
                    let qv = MatRef {
                        data: &qn.value,
                        offset: b * tq * d + h * dh,
                        rows: tq,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    };
                    let kt = MatRef {
                        data: &kn.value,
                        offset: b * tk * d + h * dh,
                        rows: tk,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    }
                    .t();
                    let ph = &mut p[h * tq * tk..(h + 1) * tq * tk];
                    gemm(scale, qv, kt, T::zero(), ph, 0, tk);
                    if let Some(m) = mask {
                        ph.iter_mut().zip(m.data()).for_each(|(s, &mv)| *s += mv);
                    }
                    ph.chunks_mut(tk).for_each(softmax_rows);
                    let vv = MatRef {
                        data: &vn.value,
                        offset: b * tk * d + h * dh,
                        rows: tk,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    };
                    gemm(T::one(), MatRef::row_major(ph, tq, tk), vv, T::zero(), o, h * dh, d);
                }
            });
            Ok((qn.shape.clone(), out, probs))
        })?;
        Ok(self.tape.push(
            shape,
            value,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                probs,
            },
        ))
    }
}

#[derive(Clone, Copy)]
struct AttnDims {
    batch: usize,
    tq: usize,
    tk: usize,
    d: usize,
    dh: usize,
}

fn attention_dims(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<AttnDims> {
    let mismatch = |rhs: &[usize]| TensorError::ShapeMismatch {
        op: "attention",
        lhs: q.to_vec(),
        rhs: rhs.to_vec(),
    };
    if q.len() < 2 || k.len() != q.len() || v.len() != q.len() {
        return Err(mismatch(k));
    }
    let r = q.len();
    if q[..r - 2] != k[..r - 2] || k != v || q[r - 1] != k[r - 1] {
        return Err(mismatch(if k != v { v } else { k }));
    }
    let d = q[r - 1];
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::InvalidShape {
            op: "attention",
            shape: q.to_vec(),
            reason: format!("width {d} not divisible into {heads} heads"),
        });
    }
    Ok(AttnDims {
        batch: q[..r - 2].iter().product(),
        tq: q[r - 2],
        tk: k[r - 2],
        d,
        dh: d / heads,
    })
}

/// Columns of head `h` in batch entry `b` of a `[B, rows, d]` buffer.
fn head_view<T>(data: &[T], b: usize, h: usize, rows: usize, d: usize, dh: usize) -> MatRef<'_, T> {
    MatRef {
        data,
        offset: b * rows * d + h * dh,
        rows,
        cols: dh,
        rs: d,
        cs: 1,
    }
}

pub(crate) fn backward_matmul<T: Float>(
    nodes: &[Node<T>],
    a: usize,
    b: usize,
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    let (an, bn) = (&nodes[a], &nodes[b]);
    let d = matmul_dims(&an.shape, &bn.shape).expect("validated in forward");
    if grads.needs(a) {
        let mut ga = vec![T::zero(); an.value.len()];
        if d.shared_rhs {
            let bt = MatRef::row_major(&bn.value, d.k, d.n).t();
            gemm_rows(g, d.batch * d.m, d.n, bt, &mut ga);
        } else {
            for_each_chunk(&mut ga, d.m * d.k, |i, c| {
                let gv = MatRef {
                    offset: i * d.m * d.n,
                    ..MatRef::row_major(g, d.m, d.n)
                };
                let bt = MatRef {
                    offset: i * d.k * d.n,
                    ..MatRef::row_major(&bn.value, d.k, d.n)
                }
                .t();
                gemm(T::one(), gv, bt, T::zero(), c, 0, d.k);
            });
        }
        grads.accumulate(a, ga);
    }
    if grads.needs(b) {
        let mut gb = vec![T::zero(); bn.value.len()];
        if d.shared_rhs {
            let at = MatRef::row_major(&an.value, d.batch * d.m, d.k).t();
            let gv = MatRef::row_major(g, d.batch * d.m, d.n);
            gemm(T::one(), at, gv, T::zero(), &mut gb, 0, d.n);
        } else {
            for_each_chunk(&mut gb, d.k * d.n, |i, c| {
                let at = MatRef {
                    offset: i * d.m * d.k,
                    ..MatRef::row_major(&an.value, d.m, d.k)
                }
                .t();
                let gv = MatRef {
                    offset: i * d.m * d.n,
                    ..MatRef::row_major(g, d.m, d.n)
                };
                gemm(T::one(), at, gv, T::zero(), c, 0, d.n);
            });
        }
        grads.accumulate(b, gb);
    }
}

pub(crate) fn backward_layernorm<T: Float>(
    node: &Node<T>,
    input: usize,
    rstd: &[T],
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    if !grads.needs(input) {
        return;
    }
    let d = *node.shape.last().expect("rank >= 1");
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut out = vec![T::zero(); g.len()];
    for (((o, gy), y), &r) in out
        .chunks_mut(d)
        .zip(g.chunks(d))
        .zip(node.value.chunks(d))
        .zip(rstd)
    {
        let mean_g = gy.iter().copied().sum::<T>() * inv_d;
        let mean_gy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for i in 0..d {
            o[i] = r * (gy[i] - mean_g - y[i] * mean_gy);
        }
    }
    grads.accumulate(input, out);
}

pub(crate) fn backward_normalize<T: Float>(
    node: &Node<T>,
    input: usize,
    norms: &[T],
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    if !grads.needs(input) {
        return;
    }
    let d = (*node.shape.last().expect("rank >= 1")).max(1);
    let mut out = vec![T::zero(); g.len()];
    for (((o, gy), y), &n) in out
        .chunks_mut(d)
        .zip(g.chunks(d))
        .zip(node.value.chunks(d))
        .zip(norms)
    {
        let dot = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
        for i in 0..d {
            o[i] = (gy[i] - y[i] * dot) / n;
        }
    }
    grads.accumulate(input, out);
}

pub(crate) fn backward_attention<T: Float>(
    nodes: &[Node<T>],
    [q, k, v]: [usize; 3],
    heads: usize,
    probs: &[T],
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    let (qn, kn, vn) = (&nodes[q], &nodes[k], &nodes[v]);
    let AttnDims { tq, tk, d, dh, .. } =
        attention_dims(&qn.shape, &kn.shape, &vn.shape, heads).expect("validated in forward");
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut dq = vec![T::zero(); qn.value.len()];
    let mut dk = vec![T::zero(); kn.value.len()];
    let mut dv = vec![T::zero(); vn.value.len()];
    for_each_chunk3(
        &mut dq,
        tq * d,
        &mut dk,
        tk * d,
        &mut dv,
        tk * d,
        |b, dq_b, dk_b, dv_b| {
            let mut ds = vec![T::zero(); tq * tk];
            for h in 0..heads {
                let p = &probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                let gv = head_view(g, b, h, tq, d, dh);
                let qv = head_view(&qn.value, b, h, tq, d, dh);
                let kv = head_view(&kn.value, b, h, tk, d, dh);
                let vv = head_view(&vn.value, b, h, tk, d, dh);
                gemm(T::one(), gv, vv.t(), T::zero(), &mut ds, 0, tk);
                for (dsr, pr) in ds.chunks_mut(tk).zip(p.chunks(tk)) {
                    let dot = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pv) in dsr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                let dsm = MatRef::row_major(&ds, tq, tk);
                gemm(T::one(), dsm, kv, T::zero(), dq_b, h * dh, d);
                gemm(T::one(), dsm.t(), qv, T::zero(), dk_b, h * dh, d);
                gemm(
                    T::one(),
                    MatRef::row_major(p, tq, tk).t(),
                    gv,
                    T::zero(),
                    dv_b,
                    h * dh,
                    d,
                );
            }
        },
    );
    grads.accumulate(q, dq);
    grads.accumulate(k, dk);
    grads.accumulate(v, dv);
}
