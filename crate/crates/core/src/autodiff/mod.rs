//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in insertion order, which is also a
//! valid topological order. Calling [`Graph::backward`] on a scalar node walks
//! the tape once in reverse and leaves `d root / d node` on every node that
//! requires a gradient. Graphs are cheap and are rebuilt for every training
//! step; parameters live outside the graph as plain [`Tensor`]s and enter it
//! as leaves.
//!
//! [`Tensor`]: crate::tensor::Tensor

mod backward;
mod gradcheck;
mod graph;
mod ops;

pub use gradcheck::grad_check;
pub use graph::{Graph, TensorNode, Var};
