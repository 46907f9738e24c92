//! Semantically aligned VAE latent spaces, a toy latent diffusion pipeline,
//! and latent-space diagnostics.

pub mod error;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for the training pipeline.
pub type DefaultScalar = f64;
