//! Study driver, covariance estimators, analytic fixtures and file IO.

pub mod estimators;
pub mod fixtures;
pub mod io;
pub mod study;

pub use estimators::{estimate_covariance, CovEstimate, Estimator, EstimatorConfig};
pub use study::{run_study, run_trial, summarize_study, StudySpec, SummaryRow, TrialResult, TruthMode};
