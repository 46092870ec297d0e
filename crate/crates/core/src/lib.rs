//! Module-wise adaptive adversarial training for modular driving pipelines.
//!
//! The crate bundles a small reverse-mode autodiff engine, a five-module
//! toy driving pipeline with named noise-injection sites, gradient-based
//! attacks, the dynamic loss-weight recurrence, training loops, robustness
//! evaluation and a kinematic closed-loop simulator.

pub mod attacks;
pub mod autodiff;
mod binio;
pub mod dwaa;
mod error;
pub mod eval;
mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
