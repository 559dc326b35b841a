//! Generative diffusion fusion for deep multi-view clustering.
//!
//! Each view is compressed by its own autoencoder. A conditional denoiser
//! turns Gaussian noise into a fused representation, guided by the
//! concatenated view latents, and the average over several generated chains
//! is clustered with k-means. Training first fits the autoencoders on
//! reconstruction, then adds a similarity-weighted contrastive loss that
//! aligns the fused representation with every view.

pub mod autoencoder;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod sgdf;
pub mod trainer;

pub use error::{ErrorKind, GdcnError, Result};
pub use gdcn_tensor as tensor;
