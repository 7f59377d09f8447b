//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar sweeps the record in reverse and returns
//! [`Gradients`] for every differentiable leaf. Graphs are built per
//! training step and dropped afterwards; parameters live outside the graph
//! and are bound as leaves with [`Graph::param`].

mod graph;
mod kernels;
pub mod nn;
mod tensor;

pub(crate) use graph::sigmoid;
pub use graph::{BatchStats, Gradients, Graph, ParamId, Var};
pub use tensor::Tensor;

/// Default stabiliser for row normalisation and cosine similarity.
pub const NORM_EPS: f64 = 1e-12;
