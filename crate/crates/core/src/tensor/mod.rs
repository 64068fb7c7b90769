//! Minimal reverse-mode automatic differentiation engine.
//!
//! Everything runs in double precision with deterministic execution: the
//! same inputs on the same tape give bitwise identical forwards/backwards.
//! Convolution follows the deep-learning convention (cross-correlation,
//! no kernel flip); GELU uses the tanh approximation.

pub mod gradcheck;
pub mod kernels;
mod graph;

pub use gradcheck::grad_check;
pub use graph::{Graph, Tensor};
