//! Multivariate time-series forecasting built around constructed auxiliary
//! series: a bank of constructors derives auxiliary channels from the input
//! series, sparsity modules gate them, a simple predictor maps lookback to
//! horizon jointly, and a projection folds the auxiliary forecasts back into
//! the output channels as a residual correction.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff
//! engine, synthetic dataset generators, a training loop, and an evaluation
//! harness.

pub mod constructors;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod params;
pub mod predictors;
pub mod sparsity;
pub mod tensor;
pub mod training;

pub use error::{CatsError, Result};
