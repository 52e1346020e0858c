//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents are
//! already on the tape, so the node order is a topological order and the
//! backward pass is a single reverse sweep. Learnable weights live in a
//! [`ParamStore`] and are bound into a graph by name; [`Adam`] updates the
//! store from the gradients collected after [`Graph::backward`].

mod adam;
mod error;
mod graph;
mod kernels;
mod params;
mod tensor;
mod unfold;

pub use adam::{Adam, AdamConfig};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{init_uniform, ParamStore};
pub use tensor::Tensor;
pub use unfold::{unfold_indices, UnfoldIndex};
