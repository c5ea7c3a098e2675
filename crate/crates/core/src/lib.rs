//! Training and evaluation library for a small person re-identification
//! model: a patch transformer backbone, weight-shared cross-attention
//! layers, an EMA teacher for self-distillation, and the losses, metrics,
//! and synthetic data needed to exercise all of it deterministically.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;
#[cfg(test)]
pub(crate) mod testutil;
pub mod xattn;

pub use autodiff::{Tape, Value};
pub use error::{CoreError, Result};
pub use gradcheck::{grad_check, FdConfig, GradReport, ScalarFn};
pub use optim::{ParamGroup, Sgd};
pub use real::Real;
pub use rng::Rng;
pub use tensor::{Tensor, TensorBase};
