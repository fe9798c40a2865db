//! Explicit regularization of the logit function for calibrated classifiers,
//! the calibration measurement stack, and desk-scale experiments on
//! synthetic data with known class posteriors.

pub mod calibration;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod regularizers;
pub mod trainer;

pub use error::{Error, Result};
