//! Central-difference Hessian with Richardson extrapolation.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RichardsonConfig {
    pub initial_step: f64,
    pub iterations: usize,
    pub step_reduction: f64,
}

impl Default for RichardsonConfig {
    fn default() -> Self {
        Self {
            initial_step: 1e-3,
            iterations: 2,
            step_reduction: 4.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumDiffError {
    #[error("invalid Richardson configuration: {0}")]
    InvalidConfig(String),
    #[error("function is not finite at evaluation {index}")]
    NonFiniteEvaluation { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    pub hessian: DMatrix<f64>,
    pub evaluations: usize,
}

/// Number of function evaluations used by [`richardson_hessian`].
pub fn evaluation_count(n: usize, iterations: usize) -> usize {
    1 + iterations * (n * n + n)
}

/// Hessian of `f` at `x`.
///
/// Each iteration evaluates `f(x ± h eᵢ)` and `f(x ± h(eᵢ + eⱼ))` for `i < j`,
/// then shrinks `h` by the step reduction. Successive estimates are combined
/// with weights for an O(h²) leading error.
pub fn richardson_hessian<F>(f: F, x: &[f64], config: &RichardsonConfig) -> Result<HessianEstimate, NumDiffError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(config.initial_step > 0.0) || config.iterations < 1 || !(config.step_reduction > 1.0) {
        return Err(NumDiffError::InvalidConfig(format!("{config:?}")));
    }
    let n = x.len();
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(NumDiffError::NonFiniteEvaluation { index: 0 });
    }
    // Offsets per iteration: (+i), (−i) for each i, then (+i+j), (−i−j) for i < j.
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    let mut evaluations = 1;
    let mut estimates = Vec::with_capacity(config.iterations);
    let mut h = config.initial_step;
    for _ in 0..config.iterations {
        let mut points: Vec<Vec<f64>> = Vec::with_capacity(n * n + n);
        for i in 0..n {
            for s in [1.0, -1.0] {
                let mut p = x.to_vec();
                p[i] += s * h;
                points.push(p);
            }
        }
        for &(i, j) in &pairs {
            for s in [1.0, -1.0] {
                let mut p = x.to_vec();
                p[i] += s * h;
                p[j] += s * h;
                points.push(p);
            }
        }
        let values: Vec<f64> = points.par_iter().map(|p| f(p)).collect();
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumDiffError::NonFiniteEvaluation { index: evaluations + bad });
        }
        evaluations += values.len();
        let plus = |i: usize| values[2 * i];
        let minus = |i: usize| values[2 * i + 1];
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..n {
            hess[(i, i)] = (plus(i) - 2.0 * f0 + minus(i)) / (h * h);
        }
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let pp = values[2 * n + 2 * k];
            let mm = values[2 * n + 2 * k + 1];
            let v = (pp - plus(i) - plus(j) + 2.0 * f0 - minus(i) - minus(j) + mm) / (2.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
        estimates.push(hess);
        h /= config.step_reduction;
    }
    let v2 = config.step_reduction * config.step_reduction;
    let mut factor = v2;
    while estimates.len() > 1 {
        estimates = estimates.windows(2).map(|w| (&w[1] * factor - &w[0]) / (factor - 1.0)).collect();
        factor *= v2;
    }
    let hess = estimates.pop().expect("at least one iteration");
    Ok(HessianEstimate {
        hessian: (&hess + hess.transpose()) * 0.5,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_after_one_iteration() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, -0.5, 1.0, 3.0, 0.2, -0.5, 0.2, 2.0]);
        let f = |x: &[f64]| {
            let v = nalgebra::DVector::from_column_slice(x);
            0.5 * v.dot(&(&a * &v)) + v.sum()
        };
        let cfg = RichardsonConfig {
            iterations: 1,
            ..Default::default()
        };
        let est = richardson_hessian(f, &[0.0, 0.0, 0.0], &cfg).unwrap();
        assert!((&est.hessian - &a).amax() < 1e-10);
        assert_eq!(est.evaluations, 1 + 12);
    }

    #[test]
    fn exponential_sum_diagonal() {
        let f = |x: &[f64]| x.iter().map(|v| v.exp()).sum::<f64>();
        let x = [0.5, -1.0, 2.0];
        let est = richardson_hessian(f, &x, &RichardsonConfig::default()).unwrap();
        for i in 0..3 {
            assert!((est.hessian[(i, i)] / x[i].exp() - 1.0).abs() < 1e-7);
            for j in 0..3 {
                if i != j {
                    assert!(est.hessian[(i, j)].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn smooth_function_matches_analytic_hessian() {
        let f = |x: &[f64]| (x[0] * x[1]).sin() + x[0].powi(3) * x[1];
        let x = [0.7, -0.4];
        let est = richardson_hessian(f, &x, &RichardsonConfig::default()).unwrap();
        let (a, b) = (x[0], x[1]);
        let s = (a * b).sin();
        let c = (a * b).cos();
        let exact = DMatrix::from_row_slice(
            2,
            2,
            &[-b * b * s + 6.0 * a * b, c - a * b * s + 3.0 * a * a, c - a * b * s + 3.0 * a * a, -a * a * s],
        );
        for i in 0..2 {
            for j in 0..2 {
                assert!((est.hessian[(i, j)] - exact[(i, j)]).abs() < 1e-6 * exact[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn evaluation_counts() {
        for (n, r, expected) in [(10, 2, 221), (5, 2, 61), (10, 3, 331)] {
            let cfg = RichardsonConfig {
                iterations: r,
                ..Default::default()
            };
            let est = richardson_hessian(|x: &[f64]| x.iter().sum(), &vec![0.0; n], &cfg).unwrap();
            assert_eq!(est.evaluations, expected);
            assert_eq!(evaluation_count(n, r), expected);
        }
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let f = |x: &[f64]| if x[0] > 0.0005 { f64::NAN } else { x[0] * x[0] };
        assert!(matches!(
            richardson_hessian(f, &[0.0], &RichardsonConfig::default()),
            Err(NumDiffError::NonFiniteEvaluation { index: 1 })
        ));
        assert!(richardson_hessian(
            |_: &[f64]| 0.0,
            &[0.0],
            &RichardsonConfig {
                iterations: 0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
