//! Reverse-mode automatic differentiation and optimization.

mod adam;
pub mod check;
mod graph;
pub mod kernels;

pub use adam::AdamState;
pub use graph::{forward, Gradients, Graph, NodeId, OpKind};
