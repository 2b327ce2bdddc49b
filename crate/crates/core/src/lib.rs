//! Non-contrast to contrast-enhanced CT translation with a syncretic
//! vector-quantized autoencoder and a similarity-masked latent diffusion model,
//! trained on synthetic paired phantoms.

pub mod autoencoder;
pub mod diffnet;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
