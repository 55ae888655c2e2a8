//! Set-Sequence models for panels of exchangeable units, with a synthetic
//! contagion benchmark, a Kalman-filter oracle, evaluation metrics and a
//! synthetic market for portfolio training.

// Comparisons such as `!(x > 0.0)` are used on purpose so that NaN fails
// validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diff;
pub mod error;
pub mod experiment;
pub mod kalman;
pub mod market;
pub mod mem;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
