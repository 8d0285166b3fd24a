//! Reverse-mode automatic differentiation over dense fp64 arrays.
//!
//! A [`Tape`] records every operation as a node; node values are immutable
//! once created. Calling [`Tape::backward`] on a scalar node walks the tape
//! in reverse and returns per-node gradients. All kernels are sequential,
//! so results are bit-deterministic for a fixed op order.

mod backward;
mod ops;

pub use backward::Gradients;
pub(crate) use ops::Op;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Borrowed view of a node's shape and data, handed to custom backward rules.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

/// An operation with a caller-supplied backward rule.
///
/// The forward value is computed by the caller and pushed with
/// [`Tape::custom`]; only the gradient logic lives here.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradient of the loss w.r.t. each input, given the upstream gradient.
    /// Entries may be `None` for inputs that do not need gradients.
    fn backward(
        &self,
        upstream: &[f64],
        inputs: &[TensorView<'_>],
        output: TensorView<'_>,
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Recording tape: owns every node of one differentiation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated for it during backward.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.push_leaf(data, shape, true)
    }

    /// Non-trainable input; backward never propagates into it.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.push_leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push_leaf(vec![v], vec![1], false).expect("scalar shape is valid")
    }

    fn push_leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(TensorError::LengthMismatch { len: data.len(), shape });
        }
        Ok(self.push(Node { shape, data, requires_grad, op: Op::Leaf }))
    }

    pub(crate) fn push(&mut self, node: Node) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(node);
        id
    }

    pub(crate) fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_rejects_bad_length() {
        let mut tape = Tape::new();
        let err = tape.leaf(vec![1.0, 2.0, 3.0], vec![2, 2]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn values_are_immutable_handles() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let y = tape.scalar_mul(x, 3.0);
        assert_eq!(tape.data(x), &[1.0, 2.0]);
        assert_eq!(tape.data(y), &[3.0, 6.0]);
    }
}
