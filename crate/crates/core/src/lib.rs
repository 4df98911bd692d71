//! Two-phase representation learning for histology-style images.
//!
//! Phase one trains a residual autoencoder greedily, one resolution stage at a
//! time, then fine-tunes it end to end. Phase two freezes the convolution
//! stacks and wraps them into an adversarial latent autoencoder with a
//! 512-dimensional latent space `w`. The remaining modules operate on that
//! latent space: FID evaluation, logistic-regression concept vectors,
//! attribute editing and interpolation.

pub mod alae;
pub mod autoencoder;
pub mod checkpoint;
pub mod concept_store;
pub mod concepts;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};

/// Dimension of both the prior space `z` and the learned latent space `w`.
pub const LATENT_DIM: usize = 512;
