//! Accuracy and diagnosability measures for covariance estimates.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("reference standard error {index} is not positive")]
    ZeroTruth { index: usize },
    #[error("need at least 2 trials, got {got}")]
    TooFewTrials { got: usize },
    #[error("matrix is zero")]
    ZeroMatrix,
}

/// Cholesky with a zero-pivot tolerance of `1e-12 · max|diag|`; returns the
/// log-determinant on success.
fn guarded_cholesky_logdet(m: &DMatrix<f64>) -> Option<f64> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut logdet = 0.0;
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        logdet += 2.0 * ljj.ln();
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(logdet)
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    guarded_cholesky_logdet(m).is_some()
}

/// ½[tr(Σ⁻¹Σ_true) − K − log(|Σ_true| / |Σ|)].
pub fn kl_divergence(sigma_true: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64, MetricsError> {
    if sigma_true.shape() != sigma.shape() {
        return Err(MetricsError::DimensionMismatch(sigma_true.nrows(), sigma.nrows()));
    }
    let ld_true = guarded_cholesky_logdet(sigma_true).ok_or(MetricsError::NotPositiveDefinite)?;
    let ld = guarded_cholesky_logdet(sigma).ok_or(MetricsError::NotPositiveDefinite)?;
    let chol = sigma.clone().cholesky().ok_or(MetricsError::NotPositiveDefinite)?;
    let k = sigma.nrows() as f64;
    let trace = chol.solve(sigma_true).trace();
    Ok(0.5 * (trace - k - (ld_true - ld)))
}

pub fn standard_errors(v: &DMatrix<f64>) -> Vec<f64> {
    v.diagonal().iter().map(|x| x.sqrt()).collect()
}

/// ‖(SE − SE_true) / SE_true‖₂.
pub fn rd_norm(se: &[f64], se_true: &[f64]) -> Result<f64, MetricsError> {
    if se.len() != se_true.len() {
        return Err(MetricsError::DimensionMismatch(se.len(), se_true.len()));
    }
    let mut sum = 0.0;
    for (i, (s, t)) in se.iter().zip(se_true).enumerate() {
        if !(*t > 0.0) {
            return Err(MetricsError::ZeroTruth { index: i });
        }
        let rd = (s - t) / t;
        sum += rd * rd;
    }
    Ok(sum.sqrt())
}

/// Spectral norm of the asymmetric part of `v` whitened by its symmetric part.
pub fn mre(v: &DMatrix<f64>) -> Result<f64, MetricsError> {
    if v.nrows() != v.ncols() {
        return Err(MetricsError::DimensionMismatch(v.nrows(), v.ncols()));
    }
    let vt = v.transpose();
    let c = (v + &vt) * 0.5;
    let k = (v - &vt) * 0.5;
    let eig = SymmetricEigen::new(c);
    let scale = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-14 * scale)) {
        return Err(MetricsError::NotPositiveDefinite);
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let c_inv_half = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let whitened = &c_inv_half * k * &c_inv_half;
    Ok(whitened.singular_values().max())
}

/// log(σ_max / σ_min); `+∞` when the smallest singular value is zero.
pub fn condition_log(m: &DMatrix<f64>) -> Result<f64, MetricsError> {
    let sv = m.singular_values();
    let max = sv.max();
    if !(max > 0.0) {
        return Err(MetricsError::ZeroMatrix);
    }
    let min = sv.min();
    Ok(if min > 0.0 { (max / min).ln() } else { f64::INFINITY })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub v: DMatrix<f64>,
    /// Generating value minus mean estimate.
    pub bias: Vec<f64>,
    pub max_abs_bias: f64,
    pub bias_norm: f64,
}

/// Sample covariance (n − 1 denominator) of trial estimates plus bias summaries.
pub fn mc_ground_truth(mles: &[Vec<f64>], generating: &[f64]) -> Result<GroundTruth, MetricsError> {
    if mles.len() < 2 {
        return Err(MetricsError::TooFewTrials { got: mles.len() });
    }
    let d = generating.len();
    if let Some(bad) = mles.iter().find(|m| m.len() != d) {
        return Err(MetricsError::DimensionMismatch(bad.len(), d));
    }
    let n = mles.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| mles.iter().map(|m| m[i]).sum::<f64>() / n).collect();
    let mut v = DMatrix::zeros(d, d);
    for m in mles {
        for i in 0..d {
            for j in 0..d {
                v[(i, j)] += (m[i] - mean[i]) * (m[j] - mean[j]);
            }
        }
    }
    v /= n - 1.0;
    let bias: Vec<f64> = generating.iter().zip(&mean).map(|(g, m)| g - m).collect();
    let max_abs_bias = bias.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let bias_norm = bias.iter().map(|b| b * b).sum::<f64>().sqrt();
    Ok(GroundTruth {
        v,
        bias,
        max_abs_bias,
        bias_norm,
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Marks values within `k` median absolute deviations of the median.
/// Non-finite values are never kept.
pub fn mad_keep(values: &[f64], k: f64) -> Vec<bool> {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return vec![false; values.len()];
    }
    finite.sort_by(f64::total_cmp);
    let med = median(&finite);
    let mut dev: Vec<f64> = finite.iter().map(|v| (v - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let mad = median(&dev);
    values.iter().map(|v| v.is_finite() && (v - med).abs() <= k * mad).collect()
}

/// Centres and scales the kept values to mean 0 and unit sample sd; dropped entries become NaN.
pub fn standardize(values: &[f64], keep: &[bool]) -> Vec<f64> {
    let kept: Vec<f64> = values.iter().zip(keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect();
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let sd = (kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    values
        .iter()
        .zip(keep)
        .map(|(v, k)| {
            if *k && sd > 0.0 {
                (v - mean) / sd
            } else if *k {
                0.0
            } else {
                f64::NAN
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_spd(seed: &[f64], d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |i, j| seed[(i * d + j) % seed.len()] + if i == j { 0.5 } else { 0.0 });
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn kl_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(kl_divergence(&i2, &i2).unwrap(), 0.0);
        let d = kl_divergence(&i2, &(&i2 * 2.0)).unwrap();
        assert!((d - 0.19314718055994531).abs() < 1e-15);
        assert_eq!(kl_divergence(&i2, &(&i2 * -1.0)), Err(MetricsError::NotPositiveDefinite));
    }

    #[test]
    fn rd_examples() {
        let t = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(rd_norm(&t, &t).unwrap(), 0.0);
        let s: Vec<f64> = t.iter().map(|v| v * 1.1).collect();
        assert!((rd_norm(&s, &t).unwrap() - 0.2).abs() < 1e-14);
        let s3: Vec<f64> = s.iter().map(|v| v * 3.0).collect();
        let t3: Vec<f64> = t.iter().map(|v| v * 3.0).collect();
        assert!((rd_norm(&s3, &t3).unwrap() - rd_norm(&s, &t).unwrap()).abs() < 1e-14);
        assert_eq!(rd_norm(&[1.0], &[0.0]), Err(MetricsError::ZeroTruth { index: 0 }));
    }

    #[test]
    fn mre_examples() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.1, 1.0]);
        assert!((mre(&v).unwrap() - 0.10206207261596576).abs() < 1e-14);
        assert!((mre(&(&v * 7.5)).unwrap() - mre(&v).unwrap()).abs() < 1e-14);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(mre(&s).unwrap(), 0.0);
    }

    #[test]
    fn condition_examples() {
        assert_eq!(condition_log(&DMatrix::identity(3, 3)).unwrap(), 0.0);
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![10f64.exp(), 1.0]));
        assert!((condition_log(&m).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(condition_log(&DMatrix::from_diagonal_element(2, 2, 1.0).map(|_| 1.0)).unwrap(), f64::INFINITY);
        assert_eq!(condition_log(&DMatrix::zeros(2, 2)), Err(MetricsError::ZeroMatrix));
    }

    #[test]
    fn ground_truth_examples() {
        let g = mc_ground_truth(&[vec![1.0], vec![-1.0]], &[0.0]).unwrap();
        assert_eq!(g.v[(0, 0)], 2.0);
        assert_eq!(g.bias, vec![0.0]);
        let same = mc_ground_truth(&vec![vec![1.0, 2.0]; 3], &[0.5, 2.5]).unwrap();
        assert_eq!(same.v, DMatrix::zeros(2, 2));
        assert_eq!(same.bias, vec![-0.5, 0.5]);
        assert_eq!(same.max_abs_bias, 0.5);
        assert!(mc_ground_truth(&[vec![1.0]], &[0.0]).is_err());
    }

    #[test]
    fn positive_definite_test_uses_pivot_tolerance() {
        assert!(is_positive_definite(&DMatrix::identity(2, 2)));
        let near = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-13]);
        assert!(!is_positive_definite(&near));
        let ok = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-9]);
        assert!(is_positive_definite(&ok));
    }

    #[test]
    fn mad_filter_drops_far_outliers() {
        let v = [1.0, 1.1, 0.9, 1.05, 0.95, 50.0, f64::NAN];
        let keep = mad_keep(&v, 10.0);
        assert_eq!(keep, vec![true, true, true, true, true, false, false]);
        let z = standardize(&v, &keep);
        let kept: Vec<f64> = z.iter().copied().filter(|x| x.is_finite()).collect();
        assert!(kept.iter().sum::<f64>().abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(a in proptest::collection::vec(-1.0f64..1.0, 9), b in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let s1 = random_spd(&a, 3);
            let s2 = random_spd(&b, 3);
            prop_assert!(kl_divergence(&s1, &s2).unwrap() >= -1e-12);
            prop_assert!(kl_divergence(&s1, &s1).unwrap().abs() < 1e-12);
        }

        #[test]
        fn mre_is_rotation_invariant(a in proptest::collection::vec(-1.0f64..1.0, 9), skew in proptest::collection::vec(-0.05f64..0.05, 3), angle in 0.0f64..std::f64::consts::TAU) {
            let c = random_spd(&a, 3);
            let mut k = DMatrix::zeros(3, 3);
            k[(0, 1)] = skew[0]; k[(1, 0)] = -skew[0];
            k[(0, 2)] = skew[1]; k[(2, 0)] = -skew[1];
            k[(1, 2)] = skew[2]; k[(2, 1)] = -skew[2];
            let v = &c + &k;
            let (s, co) = angle.sin_cos();
            let q = DMatrix::from_row_slice(3, 3, &[co, -s, 0.0, s, co, 0.0, 0.0, 0.0, 1.0]);
            let rotated = &q * &v * q.transpose();
            let a1 = mre(&v).unwrap();
            let a2 = mre(&rotated).unwrap();
            prop_assert!((a1 - a2).abs() < 1e-10 * a1.max(1e-6));
        }

        #[test]
        fn condition_matches_eigenvalues(a in proptest::collection::vec(-1.0f64..1.0, 16)) {
            let m = random_spd(&a, 4);
            let eig = SymmetricEigen::new(m.clone()).eigenvalues;
            let expected = (eig.max() / eig.min()).ln();
            prop_assert!((condition_log(&m).unwrap() - expected).abs() < 1e-10);
        }
    }
}
