//! Conformal prediction bands for randomly-timed trajectories.
//!
//! The crate covers the full pipeline:
//!
//! - [`data`]: long-format CSV cohorts, biomarker z-scoring, seeded splits,
//! - [`synth`]: an exchangeable synthetic cohort generator with ground truth,
//! - [`predictors`]: GP, quantile-regression and bootstrap-ensemble predictors
//!   returning a mean and predictive standard deviation per query month,
//! - [`conformal`]: max-normalised-residual scores, the conformal radius,
//!   prediction bands and per-group (Mondrian) calibration,
//! - [`evaluation`]: coverage/width reports over repeated splits,
//! - [`risk`]: rate-of-change scores, Youden thresholds and classification
//!   metrics,
//! - [`cli`]: the `conftraj` command line.

pub mod cli;
pub mod conformal;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod predictors;
pub mod risk;
pub mod synth;

pub use error::{Error, Result};
