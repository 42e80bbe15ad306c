//! Design toolkit for randomized experiments whose results are reweighted
//! to a target cohort.
//!
//! The crate computes variance-minimizing covariate allocations for trial
//! recruitment, scores candidate trial compositions by a deviation metric
//! that is proportional to the reweighted estimator's variance, estimates
//! the required conditional-variability profile from observational data,
//! and verifies the closed-form results with seeded Monte Carlo studies.

pub mod allocation;
pub mod domain;
pub mod error;
pub mod estimators;
pub mod io;
pub mod sigma;
pub mod simulation;

pub use error::{Arm, Error, Result};
