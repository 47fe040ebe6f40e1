//! Multi-channel face anti-spoofing on a procedural synthetic corpus.
//!
//! The crate trains a shared convolutional encoder with liveness, depth,
//! reflection, material and identity heads, then fits an independent
//! per-channel variance estimate used to fuse channel scores at inference.
//! Everything runs on a small self-contained f64 tensor engine with
//! reverse-mode automatic differentiation, so the full pipeline is
//! deterministic given a seed.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{FasError, Result};
pub use rng::Rng;
pub use tensor::Tensor;
