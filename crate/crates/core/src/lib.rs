//! Learning from explanations as a robustness problem.
//!
//! Classifiers are trained on `(x, y, m)` triplets where the mask `m` marks
//! input features the model must not rely on. The crate provides the
//! training objectives (input-gradient regularisation, masked Gaussian
//! noise, masked PGD, interval bound propagation and their combinations),
//! the small reverse-mode engine they need (including double backprop),
//! dataset builders, shortcut-learning metrics and numerical checks of the
//! Gaussian-process analysis of smoothing versus coverage.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod ibp;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
