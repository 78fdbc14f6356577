//! Spectrally-normalized adversarial training.
//!
//! - [`netcore`]: dense/convolutional feed-forward networks with reverse-mode
//!   input and parameter gradients.
//! - [`specnorm`]: power iteration for dense and convolutional layers and the
//!   `W / max(1, σ/β)` projection.
//! - [`attacks`]: FGM, PGM and WRM perturbations.
//! - [`capacity`]: margins, spectral capacity scores and bound terms.
//! - [`trainer`]: minibatch (adversarial) training with per-step normalization.
//! - [`harness`]: datasets, experiment configs and report emission.

pub mod attacks;
pub mod capacity;
mod error;
pub mod harness;
pub mod netcore;
pub mod specnorm;
pub mod trainer;

pub use error::{Error, Result};
