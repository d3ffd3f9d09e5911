//! Kernel-based goodness-of-fit testing for generative models.
//!
//! A reference sample and a data sample are pooled into a weighted
//! logistic-regression problem whose solution approximates the log density
//! ratio `log q(x)/p_R(x)`. The extended-likelihood-ratio statistic of the
//! fitted model is calibrated against toys drawn from the reference
//! distribution, giving p-values, Z-scores and per-point anomaly scores.

pub mod benchmarks;
pub mod calibration;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod io;
pub mod kernel;
pub mod seeds;
pub mod selection;
pub mod solver;
pub mod testing;
pub mod types;

pub use error::{NplmError, Result};
pub use types::{
    Dataset, Direction, NplmConfig, NullModel, Standardizer, TestReport, TrainedModel,
    ValidationSummary,
};
