//! Deterministic moment propagation for Bayesian neural networks with
//! MP-GELU and ReLU nonlinearities.
//!
//! Each layer maps the mean and covariance of its input to the mean and
//! covariance of its output in closed form, so predictive uncertainty comes
//! out of a single forward pass instead of Monte-Carlo sampling.

pub mod check;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mc_oracle;
pub mod moment_core;
pub mod network;
pub mod objective;
pub mod special;
pub mod training;

pub use error::{Error, Result};
pub use moment_core::{Covariance, CovarianceMode, MomentVector};
pub use network::{Architecture, HeadKind, LayerSpec, Model, ModelConfig, ParameterSet};
