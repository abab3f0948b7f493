//! Gradient-free, layer-parallel ADMM training for feed-forward ReLU networks.

pub mod audit;
pub mod checkpoint;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod matrix;
pub mod model;
pub mod solvers;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
