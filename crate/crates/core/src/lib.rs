//! Training-free fusion of a content adapter and a style adapter on a small
//! epsilon-prediction denoiser.
//!
//! Two mechanisms cooperate during sampling:
//!
//! * [`fusion`] picks, at every adapted layer and every timestep, whichever
//!   adapter branch moves the layer's output distribution further from the
//!   base model (KL divergence over softmaxed features).
//! * [`guidance`] corrects each reverse step with the gradient of a
//!   reference-similarity residual taken with respect to the current latent.
//!
//! [`bench`] provides the synthetic data, toy training, and evaluation harness.

pub mod bench;
pub mod diffusion;
mod error;
pub mod fusion;
pub mod guidance;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::Tensor;
