//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built once from named inputs and op nodes, evaluated with
//! [`Graph::forward`] against a [`Bindings`] source, and differentiated from a
//! scalar node with [`Graph::backward`]. Evaluation order is insertion order,
//! so repeated passes over identical inputs are bitwise reproducible.
//!
//! Broadcasting is deliberately absent: apart from [`Graph::scale`], every
//! binary op requires identical shapes.

mod check;
mod graph;
mod kernels;

pub use check::grad_check;
pub use graph::{Bindings, Gradients, Graph, Layered, NodeId, OpKind};
