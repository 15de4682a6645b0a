//! Confidence calibration under label contamination.
//!
//! Building blocks for comparing training objectives that shape predictive
//! confidence: synthetic contaminated datasets, a small MLP with exact
//! backpropagation, per-sample losses (cross-entropy, label smoothing, focal,
//! evidential, confidence penalty, dynamic regularization), a momentum-SGD
//! trainer with per-batch loss ranking, calibration and selective-prediction
//! metrics, and least-squares checks of the calibration gap under a
//! Huber-contaminated Gaussian mixture.

pub mod cli;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod special;
pub mod synthdata;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
