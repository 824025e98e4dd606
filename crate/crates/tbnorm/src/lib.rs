//! Normalization layers with hand-derived gradients and a small
//! class-incremental-learning harness.
//!
//! The crate provides four batch-style normalization layers (plain batch
//! norm, group norm, continual norm, and task-balanced batch norm) over a
//! minimal dense-tensor substrate, a finite-difference gradient checker, an
//! exemplar-replay training harness with a tiny trainable network, the usual
//! continual-learning metrics, and reproducible experiment drivers.

pub mod checkpoint;
pub mod cil;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod metrics;
pub mod norm;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
