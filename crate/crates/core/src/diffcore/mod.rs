//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations in append order; values are computed
//! lazily by [`Graph::forward`] and cached until a leaf is rebound.
//! [`Graph::backward`] returns gradients for every parameter leaf, and
//! [`finite_diff_check`] compares those against central differences.
//!
//! Non-smooth points: ReLU at 0 uses subgradient 0 and L2 norms at the
//! origin use gradient 0. The finite-difference check refuses to run when
//! an evaluation sits near either of these.

mod check;
mod graph;
mod tensor;

pub use check::{central_difference, finite_diff_check, reject_kinks_near, KINK_MARGIN_FACTOR};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

pub(crate) use graph::{dot, norm, softplus};

#[cfg(test)]
mod tests;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node {0:?} does not exist")]
    UnknownNode(NodeId),
    #[error("input `{name}` (node {node:?}) is not bound")]
    MissingInput { node: NodeId, name: String },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("node {0:?} is not an input or parameter")]
    NotALeaf(NodeId),
    #[error("{op} at node {node:?} is evaluated at a non-smooth point; finite differences are not meaningful there")]
    NonSmooth { node: NodeId, op: &'static str },
}
