//! Generic fixed-point EM engine.
//!
//! A model exposes one EM cycle `M(θ)`, the observed-data log-likelihood and
//! the complete-data information. [`run_em`] iterates the map to convergence
//! under a relative log-likelihood criterion and keeps the whole trajectory,
//! which the history-based SEM variants consume.

use nalgebra::DMatrix;
use thiserror::Error;

/// Error type returned by model callbacks.
pub type ModelError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum EmError {
    #[error("invalid EM configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid parameter vector: {0}")]
    InvalidParams(String),
    #[error("EM did not converge within {iterations} iterations")]
    IterationLimit { iterations: usize },
    #[error("non-finite log-likelihood {ll} at iteration {iteration}, theta = {theta:?}")]
    NonFiniteLl { iteration: usize, ll: f64, theta: Vec<f64> },
    #[error("relative change undefined for a zero previous log-likelihood")]
    ZeroDenominator,
    #[error("model evaluation failed: {0}")]
    Model(#[source] ModelError),
}

/// Names, bounds and equality labels of the free parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Equality label of each free slot. Constrained model entries share one slot.
    pub groups: Vec<Option<String>>,
}

impl ParamLayout {
    /// Unbounded, unlabelled layout with generated names.
    pub fn unbounded(d: usize) -> Self {
        Self {
            names: (0..d).map(|i| format!("p{}", i + 1)).collect(),
            lower: vec![f64::NEG_INFINITY; d],
            upper: vec![f64::INFINITY; d],
            groups: vec![None; d],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.len() && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }
}

/// A named, bounded free-parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self, EmError> {
        let d = values.len();
        if d == 0 {
            return Err(EmError::InvalidParams("parameter vector is empty".into()));
        }
        if layout.len() != d || layout.lower.len() != d || layout.upper.len() != d || layout.groups.len() != d {
            return Err(EmError::InvalidParams(format!(
                "layout describes {} entries but {d} values were given",
                layout.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if v.is_nan() || v < layout.lower[i] || v > layout.upper[i] {
                return Err(EmError::InvalidParams(format!(
                    "{} = {v} outside [{}, {}]",
                    layout.names[i], layout.lower[i], layout.upper[i]
                )));
            }
        }
        for i in 0..d {
            let Some(g) = &layout.groups[i] else { continue };
            for j in i + 1..d {
                if layout.groups[j].as_ref() == Some(g) && values[i].to_bits() != values[j].to_bits() {
                    return Err(EmError::InvalidParams(format!(
                        "entries {} and {} share equality group {g} but differ",
                        layout.names[i], layout.names[j]
                    )));
                }
            }
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, EmError> {
        Self::new(values, self.layout.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub rel_ll_tolerance: f64,
    pub max_iterations: usize,
    pub mstep_rel_tolerance: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self::for_sem()
    }
}

impl EmConfig {
    /// Tolerances used before SEM probing.
    pub fn for_sem() -> Self {
        Self {
            rel_ll_tolerance: 1e-11,
            max_iterations: 750,
            mstep_rel_tolerance: 1e-12,
        }
    }

    /// Tolerances used for Monte Carlo ground-truth fits.
    pub fn for_ground_truth() -> Self {
        Self {
            rel_ll_tolerance: 1e-9,
            ..Self::for_sem()
        }
    }

    pub fn validate(&self) -> Result<(), EmError> {
        if !(self.rel_ll_tolerance > 0.0) || !(self.mstep_rel_tolerance > 0.0) {
            return Err(EmError::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(EmError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Behavioral contract of a model fitted by EM.
///
/// `cycle` must be a pure function of `theta`: SEM probes call it
/// concurrently from several threads and difference nearly equal outputs.
pub trait EmModel: Sync {
    fn layout(&self) -> &ParamLayout;

    /// One E-step followed by one M-step.
    fn cycle(&self, theta: &[f64]) -> Result<Vec<f64>, ModelError>;

    /// Observed-data log-likelihood (penalized by priors when the model has any).
    fn observed_ll(&self, theta: &[f64]) -> Result<f64, ModelError>;

    /// Negative Hessian of the expected complete-data log-likelihood at `theta`.
    fn complete_info(&self, theta: &[f64]) -> Result<DMatrix<f64>, ModelError>;

    /// `(M(theta), observed_ll(theta))`. Models whose E-step yields the
    /// likelihood for free should override this.
    fn cycle_with_ll(&self, theta: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
        Ok((self.cycle(theta)?, self.observed_ll(theta)?))
    }

    fn is_feasible(&self, theta: &[f64]) -> bool {
        self.layout().contains(theta)
    }

    fn dim(&self) -> usize {
        self.layout().len()
    }
}

#[derive(Debug, Clone)]
pub struct EmRun {
    /// θ^0, θ^1, ..., θ^t with θ^t = `theta_hat`.
    pub trajectory: Vec<Vec<f64>>,
    /// 𝓛(θ^t) aligned with `trajectory`.
    pub ll_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub theta_hat: ParamVector,
    /// M(θ̂), the cycle evaluated at the returned estimate.
    pub map_at_hat: Vec<f64>,
}

impl EmRun {
    pub fn require_converged(&self) -> Result<&Self, EmError> {
        if self.converged {
            Ok(self)
        } else {
            Err(EmError::IterationLimit { iterations: self.iterations })
        }
    }

    /// ‖M(θ̂) − θ̂‖∞
    pub fn fixed_point_gap(&self) -> f64 {
        self.map_at_hat
            .iter()
            .zip(self.theta_hat.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn final_ll(&self) -> f64 {
        *self.ll_history.last().expect("history is never empty")
    }
}

/// |(prev − cur) / prev|
pub fn rel_ll_change(ll_prev: f64, ll_cur: f64) -> Result<f64, EmError> {
    if ll_prev == 0.0 {
        return Err(EmError::ZeroDenominator);
    }
    Ok(((ll_prev - ll_cur) / ll_prev).abs())
}

/// Largest λ ≥ 0 for which the double-precision sum `|r| + λ` still equals `|r|`.
pub fn additive_precision_limit(r: f64) -> f64 {
    let a = r.abs();
    let half_ulp = (a.next_up() - a) / 2.0;
    // Ties round to even: the half-ulp itself is absorbed only for an even significand.
    if a + half_ulp == a {
        half_ulp
    } else {
        half_ulp.next_down()
    }
}

pub fn run_em<M: EmModel + ?Sized>(model: &M, theta0: &ParamVector, config: &EmConfig) -> Result<EmRun, EmError> {
    config.validate()?;
    if theta0.layout().len() != model.dim() {
        return Err(EmError::InvalidParams(format!(
            "model has {} parameters, start vector has {}",
            model.dim(),
            theta0.len()
        )));
    }
    let mut theta = theta0.values().to_vec();
    let (mut next, ll0) = model.cycle_with_ll(&theta).map_err(EmError::Model)?;
    check_finite(ll0, 0, &theta)?;

    let mut trajectory = vec![theta.clone()];
    let mut ll_history = vec![ll0];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=config.max_iterations {
        theta = next;
        let (mapped, ll) = model.cycle_with_ll(&theta).map_err(EmError::Model)?;
        check_finite(ll, it, &theta)?;
        let prev = *ll_history.last().unwrap();
        trajectory.push(theta.clone());
        ll_history.push(ll);
        next = mapped;
        iterations = it;
        let change = rel_ll_change(prev, ll).unwrap_or_else(|_| (prev - ll).abs());
        if change < config.rel_ll_tolerance {
            converged = true;
            break;
        }
    }

    let theta_hat = theta0.with_values(theta)?;
    Ok(EmRun {
        trajectory,
        ll_history,
        converged,
        iterations,
        theta_hat,
        map_at_hat: next,
    })
}

fn check_finite(ll: f64, iteration: usize, theta: &[f64]) -> Result<(), EmError> {
    if ll.is_finite() {
        Ok(())
    } else {
        Err(EmError::NonFiniteLl {
            iteration,
            ll,
            theta: theta.to_vec(),
        })
    }
}
