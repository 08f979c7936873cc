//! Covariance estimators compared by the study driver and the CLI.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::{EmModel, EmRun};
use crate::metrics;
use crate::numdiff::{richardson_hessian, RichardsonConfig};
use crate::sem::{self, SemConfig, SemMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Inverse of the complete-data information.
    Mstep,
    Mr,
    Tian,
    Agile,
    /// Richardson-extrapolated Hessian of the observed log-likelihood.
    Richardson,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [Estimator::Mstep, Estimator::Mr, Estimator::Tian, Estimator::Agile, Estimator::Richardson];

    pub fn sem_method(self) -> Option<SemMethod> {
        match self {
            Estimator::Mr => Some(SemMethod::Mr),
            Estimator::Tian => Some(SemMethod::Tian),
            Estimator::Agile => Some(SemMethod::Agile),
            Estimator::Mstep | Estimator::Richardson => None,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Mstep => "mstep",
            Estimator::Mr => "mr",
            Estimator::Tian => "tian",
            Estimator::Agile => "agile",
            Estimator::Richardson => "richardson",
        })
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown estimator `{s}` (expected mstep, mr, tian, agile or richardson)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub sem: SemConfig,
    pub richardson: RichardsonConfig,
}

/// Outcome of one covariance estimator at a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct CovEstimate {
    pub estimator: Estimator,
    pub info: Option<DMatrix<f64>>,
    pub v: Option<DMatrix<f64>>,
    pub mre: Option<f64>,
    /// EM cycles or likelihood evaluations spent.
    pub evaluations: usize,
    pub betas: Vec<Option<f64>>,
    pub seconds: f64,
    pub failure: Option<String>,
}

impl CovEstimate {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.v.as_ref().map(metrics::standard_errors)
    }

    fn failed(estimator: Estimator, reason: String) -> Self {
        Self {
            estimator,
            info: None,
            v: None,
            mre: None,
            evaluations: 0,
            betas: vec![],
            seconds: 0.0,
            failure: Some(reason),
        }
    }
}

/// Inverse of a symmetric information matrix, or an error when it is not positive definite.
pub fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>, String> {
    if !metrics::is_positive_definite(info) {
        return Err("information matrix is not positive definite".into());
    }
    let chol = info.clone().cholesky().ok_or("information matrix is not positive definite")?;
    let v = chol.inverse();
    Ok((&v + v.transpose()) * 0.5)
}

/// Negative Richardson Hessian of the observed log-likelihood. Infeasible
/// points evaluate to NaN, which the differencing reports as an error.
pub fn richardson_information<M: EmModel + ?Sized>(model: &M, theta_hat: &[f64], config: &RichardsonConfig) -> Result<(DMatrix<f64>, usize), String> {
    let f = |x: &[f64]| {
        if model.is_feasible(x) {
            model.observed_ll(x).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        }
    };
    let est = richardson_hessian(f, theta_hat, config).map_err(|e| e.to_string())?;
    Ok((-est.hessian, est.evaluations))
}

pub fn estimate_covariance<M: EmModel + ?Sized>(model: &M, run: &EmRun, estimator: Estimator, config: &EstimatorConfig) -> CovEstimate {
    let start = Instant::now();
    let theta_hat = run.theta_hat.values();
    let mut out = match estimator {
        Estimator::Mstep => match model.complete_info(theta_hat) {
            Ok(ic) => from_information(estimator, ic, 1),
            Err(e) => CovEstimate::failed(estimator, e.to_string()),
        },
        Estimator::Richardson => match richardson_information(model, theta_hat, &config.richardson) {
            Ok((info, evals)) => from_information(estimator, info, evals),
            Err(e) => CovEstimate::failed(estimator, e),
        },
        Estimator::Mr | Estimator::Tian | Estimator::Agile => {
            let method = estimator.sem_method().expect("SEM estimator");
            let report = sem::estimate(model, run, &SemConfig { method, ..config.sem });
            CovEstimate {
                estimator,
                evaluations: report.total_probes(),
                info: report.observed_info,
                v: report.v,
                mre: report.mre,
                betas: report.betas,
                seconds: 0.0,
                failure: report.failure.map(|f| f.reason),
            }
        }
    };
    out.seconds = start.elapsed().as_secs_f64();
    out
}

fn from_information(estimator: Estimator, info: DMatrix<f64>, evaluations: usize) -> CovEstimate {
    match invert_information(&info) {
        Ok(v) => CovEstimate {
            estimator,
            mre: metrics::mre(&v).ok(),
            info: Some(info),
            v: Some(v),
            evaluations,
            betas: vec![],
            seconds: 0.0,
            failure: None,
        },
        Err(e) => CovEstimate {
            info: Some(info),
            evaluations,
            ..CovEstimate::failed(estimator, e)
        },
    }
}
