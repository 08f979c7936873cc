//! Standard errors for EM estimates by supplemented EM, with item factor
//! analysis models and a simulation harness for comparing estimators.

pub mod em;
pub mod harness;
pub mod ifa;
pub mod metrics;
pub mod numdiff;
pub mod sem;
