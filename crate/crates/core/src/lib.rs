//! Aesthetic score-distribution prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`distcore`]: score histograms, distributions, losses and evaluation metrics (pure `f64` math).
//! - [`autodiff`]: a small reverse-mode tape with the layers the model needs.
//! - [`spp`]: adaptive spatial pyramid pooling and the global max-pool branch.
//! - [`model`]: backbone + SPP + head assembly, late fusion and checkpoints.
//! - [`training`]: SGD with momentum, teacher targets, distillation and aesthetic stages.
//! - [`adversarial`]: pixel-space gradient descent toward shifted targets, change heatmaps.
//! - [`data`]: annotation files, images, splits and the synthetic corpus.

pub mod adversarial;
pub mod autodiff;
pub mod data;
pub mod distcore;
mod error;
pub mod model;
pub mod spp;
pub mod training;

pub use error::{Error, ErrorKind, Result};
