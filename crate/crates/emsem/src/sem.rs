//! Supplemented EM: numerically differentiate the EM map at the MLE and turn
//! the resulting rate matrix into an observed-information estimate.
//!
//! `RateMatrix::jacobian` stores probe columns, so column `j` holds
//! `∂M/∂θ_j`. The rate matrix in row-vector convention is its transpose and
//! observed information is assembled as `(I − Jᵀ) I_c`.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::em::{EmModel, EmRun, ModelError};
use crate::metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemMethod {
    Mr,
    Tian,
    Agile,
}

impl fmt::Display for SemMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SemMethod::Mr => "mr",
            SemMethod::Tian => "tian",
            SemMethod::Agile => "agile",
        })
    }
}

impl FromStr for SemMethod {
    type Err = SemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mr" => Ok(SemMethod::Mr),
            "tian" => Ok(SemMethod::Tian),
            "agile" => Ok(SemMethod::Agile),
            other => Err(SemError::InvalidConfig(format!("unknown SEM method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemConfig {
    pub method: SemMethod,
    /// Element-wise stability threshold for consecutive probe columns.
    pub sem_tolerance: f64,
    /// History offsets closer than this to zero or to the previous probe are skipped.
    pub skip_tolerance: f64,
    pub agile_u1: f64,
    /// Second Agile probe sits at `u1 · (1 + step factor)`.
    pub agile_step_factor: f64,
    pub ln_noise_target: f64,
    pub tian_window: [f64; 2],
    /// Halvings tried after a probe leaves the feasible set.
    pub bound_retries: usize,
    /// Cap on probes per parameter for MR and Tian; `None` allows the whole history.
    pub max_hist_len: Option<usize>,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self {
            method: SemMethod::Agile,
            sem_tolerance: 1e-3,
            skip_tolerance: 1e-11,
            agile_u1: 1e-3,
            agile_step_factor: 0.01,
            ln_noise_target: -5.2,
            tian_window: [0.9, 0.999],
            bound_retries: 4,
            max_hist_len: None,
        }
    }
}

impl SemConfig {
    pub fn with_method(method: SemMethod) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SemError> {
        let [lo, hi] = self.tian_window;
        if !(self.sem_tolerance > 0.0) || !(self.skip_tolerance > 0.0) || !(self.agile_u1 > 0.0) || !(self.agile_step_factor > 0.0) {
            return Err(SemError::InvalidConfig("tolerance, u1 and step factor must be positive".into()));
        }
        if !self.ln_noise_target.is_finite() {
            return Err(SemError::InvalidConfig("noise target must be finite".into()));
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(SemError::InvalidConfig(format!("Tian window [{lo}, {hi}] must lie in (0, 1)")));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SemError {
    #[error("invalid SEM configuration: {0}")]
    InvalidConfig(String),
    #[error("probe offset must be nonzero")]
    ZeroOffset,
    #[error("probe of parameter {param} at offset {offset} leaves the feasible set")]
    BoundViolation { param: usize, offset: f64 },
    #[error("no EM iteration falls in the Tian window")]
    EmptyWindow,
    #[error("column {param} did not converge")]
    ColumnNotConverged { param: usize },
    #[error("observed information is not positive definite")]
    NotPositiveDefinite,
    #[error("observed information is singular")]
    SingularInfo,
    #[error("noise curve is identically zero")]
    DegenerateFit,
    #[error("need at least 3 noise points with u > 0, got {got}")]
    TooFewPoints { got: usize },
    #[error("EM model failed: {0}")]
    Model(#[source] ModelError),
}

/// Candidate column of the rate matrix, `(M(θ̂ + ε e_j) − θ̂) / ε`.
pub fn probe_em<M: EmModel + ?Sized>(model: &M, theta_hat: &[f64], j: usize, epsilon: f64) -> Result<DVector<f64>, SemError> {
    if epsilon == 0.0 || !epsilon.is_finite() {
        return Err(SemError::ZeroOffset);
    }
    let mut theta = theta_hat.to_vec();
    theta[j] += epsilon;
    if !model.is_feasible(&theta) {
        return Err(SemError::BoundViolation { param: j, offset: epsilon });
    }
    let next = model.cycle(&theta).map_err(SemError::Model)?;
    Ok(DVector::from_iterator(next.len(), next.iter().zip(theta_hat).map(|(m, t)| (m - t) / epsilon)))
}

/// Returns `(noise, stable)` for two probe columns.
pub fn record_diff(col_a: &DVector<f64>, col_b: &DVector<f64>, offset_a: f64, offset_b: f64, tolerance: f64) -> (f64, bool) {
    let diff = (col_a - col_b).abs();
    let stable = diff.iter().all(|d| *d < tolerance);
    let dist = (offset_a - offset_b).abs();
    (diff.sum() / (diff.len() as f64 * dist), stable)
}

/// Probes at `epsilon`, falling back to `−ε`, then halved offsets of both signs.
fn probe_feasible<M: EmModel + ?Sized>(model: &M, theta_hat: &[f64], j: usize, epsilon: f64, retries: usize) -> Result<(f64, DVector<f64>), SemError> {
    let mut eps = epsilon;
    for _ in 0..=retries {
        for e in [eps, -eps] {
            match probe_em(model, theta_hat, j, e) {
                Ok(col) => return Ok((e, col)),
                Err(SemError::BoundViolation { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        eps /= 2.0;
    }
    Err(SemError::BoundViolation { param: j, offset: epsilon })
}

/// The first two Agile probes and the noise coefficient they imply.
#[derive(Debug, Clone)]
pub struct AgileNoise {
    pub offsets: [f64; 2],
    pub beta: f64,
}

pub fn agile_noise<M: EmModel + ?Sized>(model: &M, theta_hat: &[f64], j: usize, config: &SemConfig) -> Result<AgileNoise, SemError> {
    let (o1, c1) = probe_feasible(model, theta_hat, j, config.agile_u1, config.bound_retries)?;
    let o2 = o1 * (1.0 + config.agile_step_factor);
    let c2 = probe_em(model, theta_hat, j, o2)?;
    let (std_diff, _) = record_diff(&c1, &c2, o1, o2, config.sem_tolerance);
    let mid = 0.5 * (o1 + o2);
    Ok(AgileNoise {
        offsets: [o1, o2],
        beta: std_diff * mid * mid,
    })
}

/// Offset at which the modelled noise `β/u²` equals the target.
pub fn agile_offset(beta: f64, ln_target: f64, fallback: f64) -> f64 {
    if beta > 0.0 {
        (beta / ln_target.exp()).sqrt()
    } else {
        fallback
    }
}

/// Result of probing one column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnProbe {
    pub column: Option<DVector<f64>>,
    pub offsets: Vec<f64>,
    /// Index into `offsets` of the accepted probe.
    pub pick: Option<usize>,
    pub beta: Option<f64>,
}

impl ColumnProbe {
    pub fn converged(&self) -> bool {
        self.column.is_some()
    }
}

pub fn agile_column<M: EmModel + ?Sized>(model: &M, theta_hat: &[f64], j: usize, config: &SemConfig) -> Result<ColumnProbe, SemError> {
    let noise = agile_noise(model, theta_hat, j, config)?;
    agile_finish(model, theta_hat, j, &noise, config.ln_noise_target, config)
}

fn agile_finish<M: EmModel + ?Sized>(
    model: &M,
    theta_hat: &[f64],
    j: usize,
    noise: &AgileNoise,
    ln_target: f64,
    config: &SemConfig,
) -> Result<ColumnProbe, SemError> {
    let eps = agile_offset(noise.beta, ln_target, config.agile_u1);
    let (o3, col) = probe_feasible(model, theta_hat, j, eps, config.bound_retries)?;
    Ok(ColumnProbe {
        column: Some(col),
        offsets: vec![noise.offsets[0], noise.offsets[1], o3],
        pick: Some(2),
        beta: Some(noise.beta),
    })
}

/// Probes at historical offsets until two consecutive columns agree within tolerance.
pub fn history_column<M: EmModel + ?Sized>(model: &M, theta_hat: &[f64], j: usize, history: &[&[f64]], config: &SemConfig) -> Result<ColumnProbe, SemError> {
    let tol = config.sem_tolerance;
    let skip = config.skip_tolerance;
    let mut offsets: Vec<f64> = Vec::new();
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let cap = config.max_hist_len.unwrap_or(usize::MAX).max(3);
    for theta in history {
        if offsets.len() >= cap {
            break;
        }
        let offset = theta[j] - theta_hat[j];
        if offsets.last().is_some_and(|last| (last - offset).abs() < skip) {
            continue;
        }
        if offset.abs() < skip {
            continue;
        }
        let col = match probe_em(model, theta_hat, j, offset) {
            Ok(c) => c,
            Err(SemError::BoundViolation { .. }) => continue,
            Err(e) => return Err(e),
        };
        offsets.push(offset);
        columns.push(col);
        let n = columns.len();
        if n >= 2 {
            let (_, ok) = record_diff(&columns[n - 2], &columns[n - 1], offsets[n - 2], offsets[n - 1], tol);
            if ok {
                return Ok(ColumnProbe {
                    column: columns.pop(),
                    offsets,
                    pick: Some(n - 1),
                    beta: None,
                });
            }
        }
    }
    Ok(ColumnProbe {
        column: None,
        offsets,
        pick: None,
        beta: None,
    })
}

/// Iterations `t` with `exp(−|𝓛^t − 𝓛^{t+1}|)` inside the window.
pub fn tian_window(ll_history: &[f64], window: [f64; 2]) -> Result<Vec<usize>, SemError> {
    let picked: Vec<usize> = ll_history
        .windows(2)
        .enumerate()
        .filter(|(_, w)| {
            let delta = (-(w[0] - w[1]).abs()).exp();
            window[0] <= delta && delta <= window[1]
        })
        .map(|(t, _)| t)
        .collect();
    if picked.is_empty() {
        Err(SemError::EmptyWindow)
    } else {
        Ok(picked)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    pub method: SemMethod,
    /// Column `j` is the accepted probe for parameter `j`; NaN where unconverged.
    pub jacobian: DMatrix<f64>,
    pub offsets: Vec<Vec<f64>>,
    pub picks: Vec<Option<usize>>,
    pub converged: Vec<bool>,
    pub betas: Vec<Option<f64>>,
}

impl RateMatrix {
    pub fn dim(&self) -> usize {
        self.converged.len()
    }

    pub fn probe_counts(&self) -> Vec<usize> {
        self.offsets.iter().map(Vec::len).collect()
    }

    pub fn total_probes(&self) -> usize {
        self.offsets.iter().map(Vec::len).sum()
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|c| *c)
    }

    /// Rate matrix in row-vector convention.
    pub fn rate(&self) -> DMatrix<f64> {
        self.jacobian.transpose()
    }

    fn from_columns(method: SemMethod, d: usize, probes: Vec<ColumnProbe>) -> Self {
        let mut jacobian = DMatrix::from_element(d, d, f64::NAN);
        let mut rm = RateMatrix {
            method,
            jacobian: DMatrix::zeros(0, 0),
            offsets: Vec::with_capacity(d),
            picks: Vec::with_capacity(d),
            converged: Vec::with_capacity(d),
            betas: Vec::with_capacity(d),
        };
        for (j, p) in probes.into_iter().enumerate() {
            if let Some(col) = &p.column {
                jacobian.set_column(j, col);
            }
            rm.converged.push(p.converged());
            rm.offsets.push(p.offsets);
            rm.picks.push(p.pick);
            rm.betas.push(p.beta);
        }
        rm.jacobian = jacobian;
        rm
    }
}

/// Parameter snapshots offered to MR or Tian. Tian takes both iterates of
/// every step whose likelihood change falls in the window.
fn history_for<'a>(method: SemMethod, run: &'a EmRun, config: &SemConfig) -> Result<Vec<&'a [f64]>, SemError> {
    let all: Vec<&[f64]> = run.trajectory.iter().map(|p| p.as_slice()).collect();
    match method {
        SemMethod::Mr => Ok(all),
        SemMethod::Tian => {
            let mut idx: Vec<usize> = tian_window(&run.ll_history, config.tian_window)?.into_iter().flat_map(|t| [t, t + 1]).collect();
            idx.dedup();
            Ok(idx.into_iter().filter_map(|t| all.get(t).copied()).collect())
        }
        SemMethod::Agile => Ok(vec![]),
    }
}

/// Builds the rate matrix. MR and Tian stop launching columns once one fails.
pub fn rate_matrix<M: EmModel + ?Sized>(model: &M, run: &EmRun, config: &SemConfig) -> Result<RateMatrix, SemError> {
    config.validate()?;
    let theta_hat = run.theta_hat.values();
    let d = theta_hat.len();
    let history = history_for(config.method, run, config)?;
    let abort = AtomicBool::new(false);
    let probes: Vec<ColumnProbe> = (0..d)
        .into_par_iter()
        .map(|j| {
            if abort.load(Ordering::Relaxed) {
                return Ok(ColumnProbe {
                    column: None,
                    offsets: vec![],
                    pick: None,
                    beta: None,
                });
            }
            let p = match config.method {
                SemMethod::Agile => agile_column(model, theta_hat, j, config)?,
                _ => history_column(model, theta_hat, j, &history, config)?,
            };
            if !p.converged() {
                abort.store(true, Ordering::Relaxed);
            }
            Ok(p)
        })
        .collect::<Result<_, SemError>>()?;
    Ok(RateMatrix::from_columns(config.method, d, probes))
}

/// Re-probes at the accepted offsets of an earlier rate matrix.
pub fn rerun_rate_matrix<M: EmModel + ?Sized>(model: &M, theta_hat: &[f64], previous: &RateMatrix) -> Result<DMatrix<f64>, SemError> {
    let d = theta_hat.len();
    let cols = (0..d)
        .into_par_iter()
        .map(|j| {
            let pick = previous.picks[j].ok_or(SemError::ColumnNotConverged { param: j })?;
            probe_em(model, theta_hat, j, previous.offsets[j][pick])
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DMatrix::from_columns(&cols))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub observed_info: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// MRE of the covariance before symmetrization.
    pub mre: f64,
}

/// `I_o = (I − Jᵀ) I_c`, `V = I_o⁻¹`, with MRE measured before symmetrizing `V`.
pub fn assemble(jacobian: &DMatrix<f64>, ic: &DMatrix<f64>) -> Result<Assembled, SemError> {
    let d = ic.nrows();
    let io = (DMatrix::identity(d, d) - jacobian.transpose()) * ic;
    let v = io.clone().try_inverse().ok_or(SemError::SingularInfo)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(SemError::SingularInfo);
    }
    let mre = metrics::mre(&v).map_err(|_| SemError::NotPositiveDefinite)?;
    let v = (&v + v.transpose()) * 0.5;
    if !metrics::is_positive_definite(&v) {
        return Err(SemError::NotPositiveDefinite);
    }
    Ok(Assembled {
        observed_info: (&io + io.transpose()) * 0.5,
        v,
        mre,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemFailure {
    pub column: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemReport {
    pub method: SemMethod,
    pub rate: Option<RateMatrix>,
    pub observed_info: Option<DMatrix<f64>>,
    pub v: Option<DMatrix<f64>>,
    pub mre: Option<f64>,
    pub betas: Vec<Option<f64>>,
    pub elapsed: f64,
    pub failure: Option<SemFailure>,
}

impl SemReport {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.v.as_ref().map(metrics::standard_errors)
    }

    pub fn total_probes(&self) -> usize {
        self.rate.as_ref().map_or(0, RateMatrix::total_probes)
    }
}

fn failure_from(e: &SemError) -> SemFailure {
    let column = match e {
        SemError::BoundViolation { param, .. } | SemError::ColumnNotConverged { param } => Some(*param),
        _ => None,
    };
    SemFailure { column, reason: e.to_string() }
}

/// Runs the configured SEM variant at a converged EM run. Failures are recorded, not raised.
pub fn estimate<M: EmModel + ?Sized>(model: &M, run: &EmRun, config: &SemConfig) -> SemReport {
    let start = Instant::now();
    let mut report = SemReport {
        method: config.method,
        rate: None,
        observed_info: None,
        v: None,
        mre: None,
        betas: vec![],
        elapsed: 0.0,
        failure: None,
    };
    let outcome = (|| {
        let ic = model.complete_info(run.theta_hat.values()).map_err(SemError::Model)?;
        let rate = rate_matrix(model, run, config);
        let rate = match rate {
            Ok(r) => r,
            Err(e) => return Err(e),
        };
        report.betas = rate.betas.clone();
        let first_bad = rate.converged.iter().position(|c| !c);
        let jac = rate.jacobian.clone();
        report.rate = Some(rate);
        if let Some(j) = first_bad {
            return Err(SemError::ColumnNotConverged { param: j });
        }
        assemble(&jac, &ic)
    })();
    match outcome {
        Ok(a) => {
            report.observed_info = Some(a.observed_info);
            report.v = Some(a.v);
            report.mre = Some(a.mre);
        }
        Err(e) => report.failure = Some(failure_from(&e)),
    }
    report.elapsed = start.elapsed().as_secs_f64();
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePoint {
    pub u: f64,
    /// `None` when a probe left the feasible set.
    pub nu: Option<f64>,
}

/// ν(u) from probe pairs at `u ∓ w/2`.
pub fn noise_curve<M: EmModel + ?Sized>(model: &M, theta_hat: &[f64], j: usize, u_grid: &[f64], w: f64, tolerance: f64) -> Result<Vec<NoisePoint>, SemError> {
    u_grid
        .iter()
        .map(|&u| {
            let (o1, o2) = (u - 0.5 * w, u + 0.5 * w);
            let pair = probe_em(model, theta_hat, j, o1).and_then(|c1| Ok((c1, probe_em(model, theta_hat, j, o2)?)));
            match pair {
                Ok((c1, c2)) => Ok(NoisePoint {
                    u,
                    nu: Some(record_diff(&c1, &c2, o1, o2, tolerance).0),
                }),
                Err(SemError::BoundViolation { .. }) => Ok(NoisePoint { u, nu: None }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseFit {
    pub beta: f64,
    /// Uncentered coefficient of determination of the no-intercept fit.
    pub r2: f64,
}

/// Least squares of ν on u⁻² through the origin.
pub fn fit_noise_model(points: &[(f64, f64)]) -> Result<NoiseFit, SemError> {
    let usable: Vec<(f64, f64)> = points.iter().copied().filter(|(u, nu)| *u > 0.0 && nu.is_finite()).collect();
    if usable.len() < 3 {
        return Err(SemError::TooFewPoints { got: usable.len() });
    }
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (u, nu) in &usable {
        let x = 1.0 / (u * u);
        sxy += x * nu;
        sxx += x * x;
        syy += nu * nu;
    }
    if syy == 0.0 {
        return Err(SemError::DegenerateFit);
    }
    let beta = sxy / sxx;
    let ssr: f64 = usable
        .iter()
        .map(|(u, nu)| {
            let r = nu - beta / (u * u);
            r * r
        })
        .sum();
    Ok(NoiseFit { beta, r2: 1.0 - ssr / syy })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub ln_target: f64,
    pub log_kl: Option<f64>,
    pub rd: Option<f64>,
    pub mre: Option<f64>,
    pub failure: Option<String>,
}

/// Agile estimates across noise targets, scored against a reference covariance.
///
/// The two noise probes do not depend on the target, so they run once per column.
pub fn target_sweep<M: EmModel + ?Sized>(
    model: &M,
    theta_hat: &[f64],
    ic: &DMatrix<f64>,
    ln_targets: &[f64],
    truth: &DMatrix<f64>,
    config: &SemConfig,
) -> Result<Vec<SweepPoint>, SemError> {
    config.validate()?;
    let d = theta_hat.len();
    let noise: Vec<AgileNoise> = (0..d)
        .into_par_iter()
        .map(|j| agile_noise(model, theta_hat, j, config))
        .collect::<Result<_, _>>()?;
    let se_true = metrics::standard_errors(truth);
    let points = ln_targets
        .iter()
        .map(|&t| {
            let cols: Result<Vec<DVector<f64>>, SemError> = (0..d)
                .into_par_iter()
                .map(|j| Ok(agile_finish(model, theta_hat, j, &noise[j], t, config)?.column.expect("agile always converges")))
                .collect();
            let assembled = cols.and_then(|c| assemble(&DMatrix::from_columns(&c), ic));
            match assembled {
                Ok(a) => {
                    let kl = metrics::kl_divergence(truth, &a.v).ok();
                    let rd = metrics::rd_norm(&metrics::standard_errors(&a.v), &se_true).ok();
                    SweepPoint {
                        ln_target: t,
                        log_kl: kl.map(f64::ln),
                        rd,
                        mre: Some(a.mre),
                        failure: None,
                    }
                }
                Err(e) => SweepPoint {
                    ln_target: t,
                    log_kl: None,
                    rd: None,
                    mre: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{run_em, EmConfig, ParamLayout, ParamVector};
    use crate::harness::fixtures::{LinearMapModel, LinkageModel};

    fn diag_linear(rate: f64, d: usize) -> LinearMapModel {
        let ic = DMatrix::from_diagonal_element(d, d, 2.0);
        let jac = DMatrix::from_diagonal_element(d, d, rate);
        LinearMapModel::new(vec![0.5; d], jac, ic)
    }

    #[test]
    fn identity_map_probe_is_unit_column() {
        let m = diag_linear(1.0, 3);
        for eps in [1e-3, -0.2, 7.0] {
            let c = probe_em(&m, &[0.5; 3], 1, eps).unwrap();
            assert!((c - DVector::from_vec(vec![0.0, 1.0, 0.0])).amax() < 1e-12);
        }
        assert!(matches!(probe_em(&m, &[0.5; 3], 1, 0.0), Err(SemError::ZeroOffset)));
    }

    #[test]
    fn linear_map_probe_is_exact_for_every_offset() {
        let m = diag_linear(0.5, 2);
        let a = probe_em(&m, &[0.5; 2], 0, 1e-3).unwrap();
        let b = probe_em(&m, &[0.5; 2], 0, 0.25).unwrap();
        assert!((&a - DVector::from_vec(vec![0.5, 0.0])).amax() < 1e-12);
        assert!((&a - &b).amax() < 1e-12);
        // With the MLE at the origin every operation is exact.
        let m = LinearMapModel::new(vec![0.0; 2], DMatrix::from_diagonal_element(2, 2, 0.5), DMatrix::identity(2, 2));
        let a = probe_em(&m, &[0.0; 2], 0, 1e-3).unwrap();
        let b = probe_em(&m, &[0.0; 2], 0, 0.25).unwrap();
        assert_eq!(a, DVector::from_vec(vec![0.5, 0.0]));
        assert_eq!(a, b);
        let (std, ok) = record_diff(&a, &b, 1e-3, 0.25, 1e-3);
        assert_eq!(std, 0.0);
        assert!(ok);
    }

    #[test]
    fn record_diff_examples() {
        let a = DVector::from_vec(vec![1e-4, 3e-4]);
        let z = DVector::zeros(2);
        let (std, ok) = record_diff(&a, &z, 0.0, 1e-5, 1e-3);
        assert!((std - 20.0).abs() < 1e-9);
        assert!(ok);
        let edge = DVector::from_vec(vec![1e-3, 0.0]);
        assert!(!record_diff(&edge, &z, 0.0, 1.0, 1e-3).1);
    }

    #[test]
    fn agile_offset_closed_form() {
        assert!((agile_offset(1e-5, -5.2, 1e-3) - 0.04258).abs() < 5e-6);
        assert!((agile_offset(1e-5, -5.2, 1e-3) - (1e-5 * 5.2f64.exp()).sqrt()).abs() < 1e-16);
        assert_eq!(agile_offset(0.0, -5.2, 1e-3), 1e-3);
    }

    #[test]
    fn agile_on_linear_map_falls_back_and_stays_exact() {
        let m = LinearMapModel::new(vec![0.0; 3], DMatrix::from_diagonal_element(3, 3, 0.25), DMatrix::identity(3, 3));
        let p = agile_column(&m, &[0.0; 3], 2, &SemConfig::default()).unwrap();
        assert_eq!(p.beta, Some(0.0));
        assert_eq!(p.offsets.len(), 3);
        assert_eq!(p.offsets[2], 1e-3);
        assert_eq!(p.column.unwrap(), DVector::from_vec(vec![0.0, 0.0, 0.25]));
    }

    #[test]
    fn history_column_contracts() {
        let m = diag_linear(0.5, 1);
        let cfg = SemConfig::default();
        let hat = [0.5];
        let h1 = [0.9];
        let h2 = [0.7];
        let p = history_column(&m, &hat, 0, &[&h1, &h2], &cfg).unwrap();
        assert!(p.converged());
        assert_eq!(p.offsets.len(), 2);
        assert_eq!(p.pick, Some(1));
        let close = [0.5 + 1e-12];
        let p = history_column(&m, &hat, 0, &[&close, &close, &hat], &cfg).unwrap();
        assert!(!p.converged());
        assert!(p.offsets.is_empty());
    }

    #[test]
    fn history_cap_limits_probes() {
        // Rounding keeps the columns from agreeing within a vanishing tolerance.
        let m = diag_linear(0.5, 1);
        let cfg = SemConfig {
            max_hist_len: Some(3),
            sem_tolerance: 1e-300,
            ..SemConfig::default()
        };
        let hist: Vec<[f64; 1]> = (1..10).map(|k| [0.5 + 0.1 * k as f64]).collect();
        let refs: Vec<&[f64]> = hist.iter().map(|h| h.as_slice()).collect();
        let p = history_column(&m, &[0.5], 0, &refs, &cfg).unwrap();
        assert_eq!(p.offsets.len(), 3);
    }

    #[test]
    fn tian_window_examples() {
        assert_eq!(tian_window(&[-100.0, -99.95], [0.9, 0.999]).unwrap(), vec![0]);
        assert!(matches!(tian_window(&[-100.0, -99.8], [0.9, 0.999]), Err(SemError::EmptyWindow)));
        assert!(matches!(tian_window(&[-5.0; 4], [0.9, 0.999]), Err(SemError::EmptyWindow)));
    }

    #[test]
    fn assembly_examples() {
        let ic = DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 2.0]);
        let a = assemble(&DMatrix::zeros(2, 2), &ic).unwrap();
        assert_eq!(a.observed_info, ic);
        let inv = ic.clone().try_inverse().unwrap();
        assert_eq!(a.v, (&inv + inv.transpose()) * 0.5);

        let half = DMatrix::from_diagonal_element(2, 2, 0.5);
        let a = assemble(&half, &DMatrix::from_diagonal_element(2, 2, 2.0)).unwrap();
        assert_eq!(a.observed_info, DMatrix::identity(2, 2));
        assert_eq!(a.v, DMatrix::identity(2, 2));
        assert_eq!(a.mre, 0.0);

        let over = DMatrix::from_diagonal_element(2, 2, 1.5);
        assert!(matches!(assemble(&over, &ic), Err(SemError::NotPositiveDefinite)));
        assert!(matches!(assemble(&DMatrix::identity(2, 2), &ic), Err(SemError::SingularInfo)));
    }

    #[test]
    fn noise_fit_examples() {
        let us: Vec<f64> = (1..=10).map(|i| i as f64 * 1e-3).collect();
        let exact: Vec<(f64, f64)> = us.iter().map(|u| (*u, 2e-5 / (u * u))).collect();
        let fit = fit_noise_model(&exact).unwrap();
        assert!((fit.beta - 2e-5).abs() < 1e-18);
        assert!((fit.r2 - 1.0).abs() < 1e-12);

        let mut outlier = exact.clone();
        outlier[9].1 *= 2.0;
        let moved = fit_noise_model(&outlier).unwrap();
        assert!((moved.beta / fit.beta - 1.0).abs() < 0.05);

        let zeros: Vec<(f64, f64)> = us.iter().map(|u| (*u, 0.0)).collect();
        assert!(matches!(fit_noise_model(&zeros), Err(SemError::DegenerateFit)));
        assert!(matches!(fit_noise_model(&exact[..2]), Err(SemError::TooFewPoints { got: 2 })));
    }

    #[test]
    fn noise_curve_is_zero_on_linear_map() {
        let m = LinearMapModel::new(vec![0.0; 2], DMatrix::from_diagonal_element(2, 2, 0.25), DMatrix::identity(2, 2));
        let pts = noise_curve(&m, &[0.0; 2], 0, &[1e-3, 2e-3, 5e-3], 1e-5, 1e-3).unwrap();
        assert!(pts.iter().all(|p| p.nu == Some(0.0)));
    }

    #[test]
    fn bound_violation_retries_with_flipped_sign() {
        struct Bounded(ParamLayout);
        impl EmModel for Bounded {
            fn layout(&self) -> &ParamLayout {
                &self.0
            }
            fn cycle(&self, t: &[f64]) -> Result<Vec<f64>, ModelError> {
                Ok(vec![0.5 * t[0] + 0.5])
            }
            fn observed_ll(&self, t: &[f64]) -> Result<f64, ModelError> {
                Ok(-(t[0] - 1.0).powi(2) - 1.0)
            }
            fn complete_info(&self, _: &[f64]) -> Result<DMatrix<f64>, ModelError> {
                Ok(DMatrix::from_element(1, 1, 4.0))
            }
        }
        let layout = ParamLayout {
            names: vec!["p".into()],
            lower: vec![0.0],
            upper: vec![1.0],
            groups: vec![None],
        };
        let m = Bounded(layout);
        let p = agile_column(&m, &[1.0], 0, &SemConfig::default()).unwrap();
        assert!(p.offsets.iter().all(|o| *o < 0.0));
        assert!((p.column.unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn linkage_fixture_recovers_observed_information() {
        let m = LinkageModel::default();
        let run = run_em(&m, &ParamVector::new(vec![0.5], m.layout().clone()).unwrap(), &EmConfig::default()).unwrap();
        for method in [SemMethod::Mr, SemMethod::Tian, SemMethod::Agile] {
            let r = estimate(&m, &run, &SemConfig::with_method(method));
            assert!(r.succeeded(), "{method}: {:?}", r.failure);
            let io = r.observed_info.unwrap()[(0, 0)];
            assert!((io / m.observed_information(run.theta_hat.values()[0]) - 1.0).abs() < 0.01, "{method}: {io}");
        }
    }

    #[test]
    fn rerun_at_recorded_offsets_is_bitwise_identical() {
        let m = LinkageModel::default();
        let run = run_em(&m, &ParamVector::new(vec![0.5], m.layout().clone()).unwrap(), &EmConfig::default()).unwrap();
        let rate = rate_matrix(&m, &run, &SemConfig::default()).unwrap();
        let again = rerun_rate_matrix(&m, run.theta_hat.values(), &rate).unwrap();
        assert_eq!(
            again.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            rate.jacobian.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
