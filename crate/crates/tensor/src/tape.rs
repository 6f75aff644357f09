use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::ops::{self, Op};
use crate::tensor::Tensor;

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Records operations in creation order, which is a topological order of the
/// computation graph. [`Tape::backward`] walks it once in reverse.
///
/// A tape is single-threaded; independent tapes may live on different threads.
pub struct Tape<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: gradients are reported for it after backward.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let (shape, data) = value.into_parts();
        self.push_node(shape, data, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        let (shape, data) = value.into_parts();
        self.push_node(shape, data, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        ops::shape::concat(self, parts, axis)
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(shape, value, op, requires_grad)
    }

    fn push_node(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(crate::tensor::numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn with_nodes<R>(&self, f: impl FnOnce(&[Node<T>]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    /// Back-propagates from a scalar `loss`, returning gradients of every
    /// trainable leaf that the loss depends on. The tape is cleared, so all
    /// outstanding [`Var`]s of this tape become invalid.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let shape = loss.shape();
        if crate::tensor::numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads = ops::GradBuf::new(&nodes);
        grads.accumulate(loss.id, vec![T::one()]);
        let mut out = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads.take(id) else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                out.insert(id, Tensor::new(node.shape.clone(), g)?);
            } else {
                ops::backward(&nodes, id, &g, &mut grads);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Leaf gradients produced by [`Tape::backward`], keyed by the leaf's id.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Float = f32> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn take_id(&mut self, id: usize) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_nodes(|n| n[self.id].shape.clone())
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.with_nodes(|n| {
            let node = &n[self.id];
            Tensor::new(node.shape.clone(), node.value.clone()).expect("node invariant")
        })
    }

    /// Value of a single-element var.
    pub fn item(&self) -> T {
        self.tape.with_nodes(|n| {
            let node = &n[self.id];
            assert_eq!(node.value.len(), 1, "item() on shape {:?}", node.shape);
            node.value[0]
        })
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_nodes(|n| n[self.id].requires_grad)
    }
}
