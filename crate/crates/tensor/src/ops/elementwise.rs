use super::{GradBuf, Op, Unary};
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Node, Var};

/// How the smaller operand of a binary op is repeated. Only leading-axis
/// expansion is supported: the smaller shape must be a suffix of the larger.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Rhs,
    Lhs,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    if a.len() >= b.len() && a[a.len() - b.len()..] == *b {
        return Ok((a.to_vec(), Bcast::Rhs));
    }
    if b.len() > a.len() && b[b.len() - a.len()..] == *a {
        return Ok((b.to_vec(), Bcast::Lhs));
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn binary<'t, T: Float>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    name: &'static str,
    f: impl Fn(T, T) -> T,
    op: Op<T>,
) -> Result<Var<'t, T>> {
    let (shape, value) = a.tape.with_nodes(|nodes| {
        let (x, y) = (&nodes[a.id], &nodes[b.id]);
        let (shape, mode) = broadcast(name, &x.shape, &y.shape)?;
        let value = match mode {
            Bcast::Same => x.value.iter().zip(&y.value).map(|(&p, &q)| f(p, q)).collect(),
            Bcast::Rhs => {
                let n = y.value.len().max(1);
                x.value
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| f(p, y.value[i % n]))
                    .collect()
            }
            Bcast::Lhs => {
                let n = x.value.len().max(1);
                y.value
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| f(x.value[i % n], q))
                    .collect()
            }
        };
        Ok::<_, TensorError>((shape, value))
    })?;
    Ok(a.tape.push(shape, value, op))
}

/// Sums `g` down to a buffer of length `n` by folding repetitions.
fn fold_to<T: Float>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
    }
    out
}

fn repeat_index(i: usize, n: usize) -> usize {
    if n == 0 {
        0
    } else {
        i % n
    }
}

impl<'t, T: Float> Var<'t, T> {
    /// Element-wise sum; the smaller operand may be a shape suffix of the larger.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.map_op(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        self.map_op(|x| x + s, Op::AddScalar(self.id))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Unary::Gelu)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(Unary::Sqrt)
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(Unary::Log)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(Unary::Silu)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(Unary::Softplus)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Unary::Tanh)
    }

    /// Element-wise Huber penalty: `x^2/2` inside `delta`, linear outside.
    pub fn huber(self, delta: T) -> Var<'t, T> {
        self.map_op(move |x| huber(x, delta), Op::Huber(self.id, delta))
    }

    fn unary(self, kind: Unary) -> Var<'t, T> {
        self.map_op(move |x| unary_forward(kind, x), Op::Unary(self.id, kind))
    }

    fn map_op(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'t, T> {
        let (shape, value) = self.tape.with_nodes(|nodes| {
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        });
        self.tape.push(shape, value, op)
    }
}

fn c<T: Float>(v: f64) -> T {
    T::from_f64(v)
}

pub(crate) fn huber<T: Float>(x: T, delta: T) -> T {
    let a = x.abs();
    if a <= delta {
        c::<T>(0.5) * x * x
    } else {
        delta * (a - c::<T>(0.5) * delta)
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn unary_forward<T: Float>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Gelu => {
            let u = c::<T>(GELU_C) * (x + c::<T>(GELU_K) * x * x * x);
            c::<T>(0.5) * x * (T::one() + u.tanh())
        }
        Unary::Sqrt => x.sqrt(),
        Unary::Log => x.ln(),
        Unary::Exp => x.exp(),
        Unary::Silu => x * sigmoid(x),
        Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        Unary::Tanh => x.tanh(),
    }
}

fn unary_derivative<T: Float>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Gelu => {
            let u = c::<T>(GELU_C) * (x + c::<T>(GELU_K) * x * x * x);
            let th = u.tanh();
            let du = c::<T>(GELU_C) * (T::one() + c::<T>(3.0 * GELU_K) * x * x);
            c::<T>(0.5) * (T::one() + th) + c::<T>(0.5) * x * (T::one() - th * th) * du
        }
        Unary::Sqrt => c::<T>(0.5) / y,
        Unary::Log => T::one() / x,
        Unary::Exp => y,
        Unary::Silu => {
            let s = sigmoid(x);
            s + x * s * (T::one() - s)
        }
        Unary::Softplus => sigmoid(x),
        Unary::Tanh => T::one() - y * y,
    }
}

pub(crate) fn backward_unary<T: Float>(
    nodes: &[Node<T>],
    node: &Node<T>,
    a: usize,
    kind: Unary,
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    if !grads.needs(a) {
        return;
    }
    let x = &nodes[a].value;
    let out = g
        .iter()
        .zip(x.iter().zip(&node.value))
        .map(|(&gi, (&xi, &yi))| gi * unary_derivative(kind, xi, yi))
        .collect();
    grads.accumulate(a, out);
}

pub(crate) fn backward_huber<T: Float>(
    nodes: &[Node<T>],
    a: usize,
    delta: T,
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    if !grads.needs(a) {
        return;
    }
    let out = g
        .iter()
        .zip(&nodes[a].value)
        .map(|(&gi, &x)| {
            let d = if x.abs() <= delta { x } else { delta * x.signum() };
            gi * d
        })
        .collect();
    grads.accumulate(a, out);
}

pub(crate) fn backward_binary<T: Float>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut GradBuf<T>,
) {
    match node.op {
        Op::Scale(a, s) => {
            if grads.needs(a) {
                grads.accumulate(a, g.iter().map(|&x| x * s).collect());
            }
        }
        Op::AddScalar(a) => grads.accumulate(a, g.to_vec()),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if grads.needs(a) {
                grads.accumulate(a, fold_to(g, nodes[a].value.len()));
            }
            if grads.needs(b) {
                let mut gb = fold_to(g, nodes[b].value.len());
                if sign < T::zero() {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                grads.accumulate(b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            if grads.needs(a) {
                let n = vb.len();
                let full: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * vb[repeat_index(i, n)])
                    .collect();
                grads.accumulate(a, fold_to(&full, va.len()));
            }
            if grads.needs(b) {
                let n = va.len();
                let full: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * va[repeat_index(i, n)])
                    .collect();
                grads.accumulate(b, fold_to(&full, vb.len()));
            }
        }
        _ => unreachable!("not an element-wise binary op"),
    }
}
