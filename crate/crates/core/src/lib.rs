//! GMM estimation when the moment conditions may be misspecified.
//!
//! The crate covers standard one-step GMM with misspecification-robust
//! variances, the misspecification-efficient (ME) estimator and its bound,
//! recentered bootstraps, a repeated split-sample estimator and a Monte
//! Carlo harness.

pub mod cli;
pub mod covariance;
pub mod error;
pub mod estimate;
pub mod linalg;
pub mod me;
pub mod model;
pub mod montecarlo;
pub mod resample;
pub mod solver;

pub use error::{GmmError, Result};
