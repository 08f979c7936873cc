//! Item response probability functions and analytic derivatives of the log
//! response probability with respect to item parameters.
//!
//! Parameter order inside an item:
//! - dichotomous: `a_1..a_f, c, g`
//! - graded:      `a_1..a_f, c_1..c_{K-1}` (strictly decreasing intercepts)
//! - nominal:     `s_1..s_f, alpha_1..alpha_{K-1}, gamma_1..gamma_{K-1}`

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::IfaError;

/// Linear predictors beyond this magnitude are clamped.
pub const MAX_LOGIT: f64 = 35.0;

#[inline]
pub fn logistic(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

#[inline]
pub fn logistic_clamped(l: f64) -> f64 {
    logistic(l.clamp(-MAX_LOGIT, MAX_LOGIT))
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn is_clamped(l: f64) -> bool {
    l.abs() > MAX_LOGIT
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Response model of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ItemModel {
    Dichotomous {
        factors: usize,
    },
    Graded {
        factors: usize,
        outcomes: usize,
    },
    Nominal {
        factors: usize,
        outcomes: usize,
        /// K × (K−1) slope transform, first row zero.
        ta: Vec<Vec<f64>>,
        /// K × (K−1) intercept transform, first row zero.
        tc: Vec<Vec<f64>>,
    },
}

impl ItemModel {
    pub fn factors(&self) -> usize {
        match self {
            Self::Dichotomous { factors } | Self::Graded { factors, .. } | Self::Nominal { factors, .. } => *factors,
        }
    }

    pub fn outcomes(&self) -> usize {
        match self {
            Self::Dichotomous { .. } => 2,
            Self::Graded { outcomes, .. } | Self::Nominal { outcomes, .. } => *outcomes,
        }
    }

    pub fn n_params(&self) -> usize {
        let f = self.factors();
        match self {
            Self::Dichotomous { .. } => f + 2,
            Self::Graded { outcomes, .. } => f + outcomes - 1,
            Self::Nominal { outcomes, .. } => f + 2 * (outcomes - 1),
        }
    }

    /// Short names of the item parameters, in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let f = self.factors();
        let mut names: Vec<String> = match self {
            Self::Nominal { .. } => (1..=f).map(|i| format!("s{i}")).collect(),
            _ => (1..=f).map(|i| format!("a{i}")).collect(),
        };
        match self {
            Self::Dichotomous { .. } => {
                names.push("c".into());
                names.push("g".into());
            }
            Self::Graded { outcomes, .. } => names.extend((1..*outcomes).map(|k| format!("c{k}"))),
            Self::Nominal { outcomes, .. } => {
                names.extend((1..*outcomes).map(|k| format!("alpha{k}")));
                names.extend((1..*outcomes).map(|k| format!("gamma{k}")));
            }
        }
        names
    }

    pub fn validate(&self) -> Result<(), IfaError> {
        if self.factors() == 0 {
            return Err(IfaError::InvalidSpec("item loads no factor".into()));
        }
        match self {
            Self::Dichotomous { .. } => Ok(()),
            Self::Graded { outcomes, .. } if *outcomes >= 2 => Ok(()),
            Self::Graded { .. } => Err(IfaError::InvalidSpec("graded item needs at least 2 outcomes".into())),
            Self::Nominal { outcomes, ta, tc, .. } => {
                let k = *outcomes;
                if k < 3 {
                    return Err(IfaError::InvalidSpec("nominal item needs at least 3 outcomes".into()));
                }
                for (name, t) in [("ta", ta), ("tc", tc)] {
                    if t.len() != k || t.iter().any(|row| row.len() != k - 1) {
                        return Err(IfaError::InvalidSpec(format!("{name} must be {k} x {}", k - 1)));
                    }
                    if t[0].iter().any(|&v| v != 0.0) {
                        return Err(IfaError::InvalidSpec(format!("first row of {name} must be zero")));
                    }
                }
                Ok(())
            }
        }
    }

    /// Whether `params` describe valid response probabilities (graded ordering).
    pub fn params_feasible(&self, params: &[f64]) -> bool {
        match self {
            Self::Graded { factors, .. } => params[*factors..].windows(2).all(|w| w[0] > w[1]),
            _ => params.iter().all(|p| !p.is_nan()),
        }
    }

    /// Category probabilities at latent point `tau`.
    pub fn probs(&self, params: &[f64], tau: &[f64], out: &mut [f64]) {
        let f = self.factors();
        match self {
            Self::Dichotomous { .. } => {
                let [p0, p1] = prob_dichotomous(&params[..f], params[f], params[f + 1], tau);
                out[0] = p0;
                out[1] = p1;
            }
            Self::Graded { .. } => graded_into(&params[..f], &params[f..], tau, out),
            Self::Nominal { outcomes, ta, tc, .. } => {
                let k1 = outcomes - 1;
                nominal_into(&params[..f], &params[f..f + k1], &params[f + k1..], ta, tc, tau, out)
            }
        }
    }

    /// log P_k and its gradient/Hessian with respect to all item parameters.
    ///
    /// `grad` has length `n_params`, `hess` is row-major `n_params²`; both are overwritten.
    pub fn log_prob_derivs(&self, params: &[f64], tau: &[f64], k: usize, grad: &mut [f64], hess: &mut [f64]) -> f64 {
        grad.fill(0.0);
        hess.fill(0.0);
        match self {
            Self::Dichotomous { factors } => dichotomous_derivs(*factors, params, tau, k, grad, hess),
            Self::Graded { factors, outcomes } => graded_derivs(*factors, *outcomes, params, tau, k, grad, hess),
            Self::Nominal { factors, outcomes, ta, tc } => nominal_derivs(*factors, *outcomes, ta, tc, params, tau, k, grad, hess),
        }
    }
}

/// `(P0, P1)` of the dichotomous model; `g = −∞` gives the 2PL.
pub fn prob_dichotomous(a: &[f64], c: f64, g: f64, tau: &[f64]) -> [f64; 2] {
    let l = dot(a, tau) + c;
    let guess = logistic(g);
    let p1 = guess + (1.0 - guess) * logistic_clamped(l);
    let p0 = (1.0 - guess) * logistic_clamped(-l);
    [p0, p1]
}

/// Graded response probabilities; errors when an intercept ordering makes a category negative.
pub fn prob_graded(a: &[f64], c: &[f64], tau: &[f64]) -> Result<Vec<f64>, IfaError> {
    let mut out = vec![0.0; c.len() + 1];
    graded_into(a, c, tau, &mut out);
    if let Some(k) = out.iter().position(|&p| p < 0.0) {
        return Err(IfaError::OrderingViolation { category: k });
    }
    Ok(out)
}

/// `logistic(hi) − logistic(lo)` on clamped logits without cancellation.
///
/// When both logits clamp to the same side the gap is exactly zero; it is
/// floored at the smallest normal double so log-likelihoods stay finite.
fn logistic_gap(hi: f64, lo: f64) -> f64 {
    let (hi, lo) = (hi.clamp(-MAX_LOGIT, MAX_LOGIT), lo.clamp(-MAX_LOGIT, MAX_LOGIT));
    let gap = -logistic(hi) * logistic(-lo) * (lo - hi).exp_m1();
    if gap >= 0.0 {
        gap.max(f64::MIN_POSITIVE)
    } else {
        gap
    }
}

fn graded_into(a: &[f64], c: &[f64], tau: &[f64], out: &mut [f64]) {
    let at = dot(a, tau);
    let km1 = c.len();
    out[0] = logistic_clamped(-(at + c[0]));
    for k in 1..km1 {
        out[k] = logistic_gap(at + c[k - 1], at + c[k]);
    }
    out[km1] = logistic_clamped(at + c[km1 - 1]);
}

/// Nominal model probabilities with `a = Ta·alpha` and `c = Tc·gamma`,
/// normalizing logistic category terms.
pub fn prob_nominal(s: &[f64], alpha: &[f64], gamma: &[f64], ta: &[Vec<f64>], tc: &[Vec<f64>], tau: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; ta.len()];
    nominal_into(s, alpha, gamma, ta, tc, tau, &mut out);
    out
}

fn nominal_into(s: &[f64], alpha: &[f64], gamma: &[f64], ta: &[Vec<f64>], tc: &[Vec<f64>], tau: &[f64], out: &mut [f64]) {
    let st = dot(s, tau);
    let mut total = 0.0;
    for k in 0..ta.len() {
        let t = logistic_clamped(st * dot(&ta[k], alpha) + dot(&tc[k], gamma));
        out[k] = t;
        total += t;
    }
    for p in out.iter_mut() {
        *p /= total;
    }
}

/// Writes grad/hess of log P from grad/hess of P.
fn log_from_prob(p: f64, dp: &[f64], d2p: &[f64], grad: &mut [f64], hess: &mut [f64]) {
    let n = dp.len();
    for i in 0..n {
        grad[i] = dp[i] / p;
    }
    for i in 0..n {
        for j in 0..n {
            hess[i * n + j] = d2p[i * n + j] / p - grad[i] * grad[j];
        }
    }
}

fn dichotomous_derivs(f: usize, params: &[f64], tau: &[f64], k: usize, grad: &mut [f64], hess: &mut [f64]) -> f64 {
    let n = f + 2;
    let (ci, gi) = (f, f + 1);
    let l = dot(&params[..f], tau) + params[ci];
    let g = params[gi];
    let p = logistic_clamped(l);
    let q = logistic_clamped(-l);
    let live = !is_clamped(l);
    let guess = logistic(g);
    let guess_c = logistic(-g);
    // d l / d param
    let mut dl = vec![0.0; n];
    dl[..f].copy_from_slice(tau);
    dl[ci] = 1.0;

    if k == 0 {
        // log P0 = log(1 − γ) + log(1 − p)
        if live {
            for i in 0..n {
                grad[i] = -p * dl[i];
                for j in 0..n {
                    hess[i * n + j] = -p * q * dl[i] * dl[j];
                }
            }
        }
        grad[gi] = -guess;
        hess[gi * n + gi] = -guess * guess_c;
        guess_c.ln() + q.ln()
    } else {
        let p1 = guess + guess_c * p;
        let mut dp = vec![0.0; n];
        let mut d2p = vec![0.0; n * n];
        let dpdl = if live { guess_c * p * q } else { 0.0 };
        let d2pdl2 = if live { guess_c * p * q * (q - p) } else { 0.0 };
        let dgg = guess * guess_c;
        let dpdg = dgg * q;
        let d2pdg2 = dgg * (guess_c - guess) * q;
        let d2pdldg = if live { -dgg * p * q } else { 0.0 };
        for i in 0..n {
            dp[i] = dpdl * dl[i];
            for j in 0..n {
                d2p[i * n + j] = d2pdl2 * dl[i] * dl[j];
            }
        }
        dp[gi] = dpdg;
        for i in 0..n {
            d2p[i * n + gi] = d2pdldg * dl[i];
            d2p[gi * n + i] = d2pdldg * dl[i];
        }
        d2p[gi * n + gi] = d2pdg2;
        log_from_prob(p1, &dp, &d2p, grad, hess);
        p1.ln()
    }
}

fn graded_derivs(f: usize, outcomes: usize, params: &[f64], tau: &[f64], k: usize, grad: &mut [f64], hess: &mut [f64]) -> f64 {
    let n = f + outcomes - 1;
    let at = dot(&params[..f], tau);
    // Boundary b (1..K−1) uses intercept at parameter index f + b − 1.
    // Returns (F, F', F'') of the cumulative curve at boundary b; b = 0 and b = K are constants.
    let boundary = |b: usize| -> (f64, f64, f64) {
        if b == 0 {
            return (1.0, 0.0, 0.0);
        }
        if b == outcomes {
            return (0.0, 0.0, 0.0);
        }
        let l = at + params[f + b - 1];
        let big_f = logistic_clamped(l);
        if is_clamped(l) {
            (big_f, 0.0, 0.0)
        } else {
            let d1 = big_f * logistic_clamped(-l);
            (big_f, d1, d1 * (1.0 - 2.0 * big_f))
        }
    };
    let (_, d1u, d2u) = boundary(k);
    let (_, d1l, d2l) = boundary(k + 1);
    let prob = if k == 0 {
        logistic_clamped(-(at + params[f]))
    } else if k == outcomes - 1 {
        logistic_clamped(at + params[f + k - 1])
    } else {
        logistic_gap(at + params[f + k - 1], at + params[f + k])
    };

    let mut dp = vec![0.0; n];
    let mut d2p = vec![0.0; n * n];
    for i in 0..f {
        dp[i] = tau[i] * (d1u - d1l);
        for j in 0..f {
            d2p[i * n + j] = tau[i] * tau[j] * (d2u - d2l);
        }
    }
    if k >= 1 {
        let cu = f + k - 1;
        dp[cu] = d1u;
        d2p[cu * n + cu] = d2u;
        for i in 0..f {
            d2p[i * n + cu] = tau[i] * d2u;
            d2p[cu * n + i] = tau[i] * d2u;
        }
    }
    if k + 1 < outcomes {
        let cl = f + k;
        dp[cl] = -d1l;
        d2p[cl * n + cl] = -d2l;
        for i in 0..f {
            d2p[i * n + cl] = -tau[i] * d2l;
            d2p[cl * n + i] = -tau[i] * d2l;
        }
    }
    log_from_prob(prob, &dp, &d2p, grad, hess);
    prob.ln()
}

#[allow(clippy::too_many_arguments)]
fn nominal_derivs(
    f: usize,
    outcomes: usize,
    ta: &[Vec<f64>],
    tc: &[Vec<f64>],
    params: &[f64],
    tau: &[f64],
    k: usize,
    grad: &mut [f64],
    hess: &mut [f64],
) -> f64 {
    let k1 = outcomes - 1;
    let n = f + 2 * k1;
    let s = &params[..f];
    let alpha = &params[f..f + k1];
    let gamma = &params[f + k1..];
    let st = dot(s, tau);

    // Per category: predictor l_j, its gradient and Hessian w.r.t. the item parameters.
    let mut terms = Vec::with_capacity(outcomes);
    let mut dls = Vec::with_capacity(outcomes);
    let mut live = Vec::with_capacity(outcomes);
    for j in 0..outcomes {
        let aj = dot(&ta[j], alpha);
        let l = st * aj + dot(&tc[j], gamma);
        terms.push(logistic_clamped(l));
        live.push(!is_clamped(l));
        let mut dl = vec![0.0; n];
        for i in 0..f {
            dl[i] = tau[i] * aj;
        }
        for m in 0..k1 {
            dl[f + m] = st * ta[j][m];
            dl[f + k1 + m] = tc[j][m];
        }
        dls.push(dl);
    }
    // ∂²l_j / ∂s_i ∂alpha_m = tau_i Ta[j][m]
    let d2l = |j: usize, r: usize, c: usize| -> f64 {
        if r < f && (f..f + k1).contains(&c) {
            tau[r] * ta[j][c - f]
        } else if c < f && (f..f + k1).contains(&r) {
            tau[c] * ta[j][r - f]
        } else {
            0.0
        }
    };
    let total: f64 = terms.iter().sum();

    // log S derivatives
    let mut gs = vec![0.0; n];
    let mut hs = vec![0.0; n * n];
    for j in 0..outcomes {
        if !live[j] {
            continue;
        }
        let t = terms[j];
        let d1 = t * (1.0 - t);
        let d2 = d1 * (1.0 - 2.0 * t);
        for r in 0..n {
            gs[r] += d1 * dls[j][r] / total;
            for c in 0..n {
                hs[r * n + c] += (d2 * dls[j][r] * dls[j][c] + d1 * d2l(j, r, c)) / total;
            }
        }
    }
    for r in 0..n {
        for c in 0..n {
            hs[r * n + c] -= gs[r] * gs[c];
        }
    }

    let t = terms[k];
    let (u1, u2) = if live[k] { (1.0 - t, -t * (1.0 - t)) } else { (0.0, 0.0) };
    for r in 0..n {
        grad[r] = u1 * dls[k][r] - gs[r];
        for c in 0..n {
            hess[r * n + c] = u2 * dls[k][r] * dls[k][c] + u1 * d2l(k, r, c) - hs[r * n + c];
        }
    }
    (t / total).ln()
}

/// Gradient and Hessian of log P_k as owned values.
pub fn item_deriv(model: &ItemModel, params: &[f64], tau: &[f64], k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = model.n_params();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    model.log_prob_derivs(params, tau, k, &mut grad, &mut hess);
    (grad, DMatrix::from_row_slice(n, n, &hess))
}
