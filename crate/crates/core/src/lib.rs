//! Retrospective MRI motion correction with a conditional hierarchical
//! vector-quantized autoencoder and class-conditioned autoregressive priors
//! over its codebook indices.

pub mod error;
mod layers;
pub mod motion_sim;
pub mod networks;
pub mod pipeline;
pub mod prior_ar;
pub mod training;
pub mod vq_core;

pub use error::{Error, Result};
