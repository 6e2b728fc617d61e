//! Grids and the recorded-graph reverse-mode engine.
//!
//! [`Grid`] is the one tensor type in the crate: a channels-by-height-by-width
//! block of `f64`. [`GraphBuilder`] records a computation over grids as an
//! explicit node list; [`DiffGraph::forward`] evaluates it and
//! [`DiffGraph::backward`] accumulates exact adjoints for every named leaf.
//! [`grad_check`] is the central finite-difference oracle used by tests of
//! anything differentiable.

mod grid;
mod graph;
mod gradcheck;

pub use grid::{resize_bilinear, resize_bilinear_adjoint, Grid};
pub use graph::{Bindings, DiffGraph, Gradients, GraphBuilder, NodeId};
pub use gradcheck::grad_check;
