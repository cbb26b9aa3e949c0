//! Weakly supervised pixel-level segmentation of large slides from slide-level labels.
//!
//! The crate is organised bottom-up:
//!
//! * [`divergence`] - the noise-robust beta-generalized KL divergence and the
//!   one-pixel model used to pick its shape parameters.
//! * [`aggregation`] - pixel softmax and mean / top-k pooling of pixel logits
//!   into slide (or patch) logits, with the matching backward pass.
//! * [`sampler`] - confidence-weighted patch sampling, slide scheduling and the
//!   shuffle buffer.
//! * [`synthwsi`] - a deterministic synthetic slide generator with exact masks.
//! * [`model`] - a small encoder/decoder convolutional network with hand-written
//!   gradients.
//! * [`pipeline`] - the mapping and training workers, concurrent or interleaved.
//! * [`metrics`] - ROC AUC, FROC and overlap scores.

pub mod aggregation;
pub mod divergence;
mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod synthwsi;

pub use error::{Error, Result};
