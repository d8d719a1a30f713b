//! Evidential deep regression for continuous manuscript dating.
//!
//! A network maps an image patch to the four parameters of a
//! Normal-Inverse-Gamma distribution over a normalized year axis. From those
//! parameters come a point estimate, an aleatoric/epistemic variance split and
//! Student-t prediction intervals, all in one forward pass. The crate also
//! carries the comparison models (point regressor, century classifier,
//! MC-Dropout, deep ensemble), a synthetic manuscript corpus, and the metrics
//! used to judge calibration and selective prediction.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nig;
pub mod pipeline;
pub mod rng;
pub mod special;
pub mod training;

pub use error::{Error, Result};
