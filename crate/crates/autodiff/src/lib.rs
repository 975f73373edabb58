//! Deterministic reverse-mode automatic differentiation over dense `f64`
//! tensors, with just enough operators for convolutional autoencoders and
//! causal autoregressive priors.
//!
//! Every kernel is single-threaded and iterates in a fixed order, so a given
//! graph produces bitwise-identical values and gradients on every run.

mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
