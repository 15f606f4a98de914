//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and returns
//! the gradient of every node that depends on a leaf created with
//! [`Graph::leaf`]. Leaves created with [`Graph::constant`] never receive
//! gradients, and neither does anything computed purely from constants.
//!
//! The op set is the one a small transformer needs: broadcasting arithmetic,
//! (batched) matrix products, layer normalization, softmax, a few pointwise
//! nonlinearities and the reshaping ops used to move between token layouts.
//! Shape errors are programming errors in the model code and panic with a
//! message naming the op.

mod ops;
mod real;

pub use real::Real;

use ndarray::{ArrayD, IxDyn};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Gelu(Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<F> },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize, keep: bool },
    MeanAll(Var),
    SumAll(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
}

pub(crate) struct Node<F: Real> {
    pub(crate) value: ArrayD<F>,
    pub(crate) op: Op<F>,
    pub(crate) tracked: bool,
}

/// A recording of tensor operations.
pub struct Graph<F: Real> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push_raw(value.as_standard_layout().into_owned(), Op::Leaf, false)
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push_raw(value.as_standard_layout().into_owned(), Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: F) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Moves the value out of the graph, leaving an empty array behind.
    pub fn take(&mut self, v: Var) -> ArrayD<F> {
        std::mem::replace(&mut self.nodes[v.0].value, ArrayD::zeros(IxDyn(&[0])))
    }

    pub(crate) fn push_raw(&mut self, value: ArrayD<F>, op: Op<F>, tracked: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: ArrayD<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        // Untracked results are folded into constants so backward never visits them.
        let op = if tracked { op } else { Op::Leaf };
        self.push_raw(value, op, tracked)
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Takes ownership of a gradient; missing gradients come back as zeros of `shape`.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> ArrayD<F> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(shape)))
    }
}
