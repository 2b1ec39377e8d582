//! Feature-space adversarial attacks against frozen encoder pipelines and the
//! OOD detectors guarding them.
//!
//! The crate implements two attack directions over projected-gradient descent
//! under an ℓ∞ constraint — pushing in-distribution inputs to be rejected as
//! OOD, and pulling noise-seeded "distal" inputs into chosen ID classes — plus
//! the evaluation harness: classification heads over frozen features, MCM/MSP
//! detectors with 95%-TPR thresholding, transfer campaigns over model pools,
//! and report persistence/rendering.

pub mod attack;
pub mod error;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod ood;
pub mod rng;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
