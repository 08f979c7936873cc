//! Closed-form EM models used as oracles for the SEM estimators.

use nalgebra::{DMatrix, DVector};

use crate::em::{EmModel, ModelError, ParamLayout};

/// Four-cell multinomial with cell probabilities
/// `(½ + θ/4, (1 − θ)/4, (1 − θ)/4, θ/4)`. EM splits the first cell into
/// halves with probabilities `½` and `θ/4`.
#[derive(Debug, Clone)]
pub struct LinkageModel {
    pub counts: [f64; 4],
    layout: ParamLayout,
}

impl Default for LinkageModel {
    fn default() -> Self {
        Self::new([125.0, 18.0, 20.0, 34.0])
    }
}

impl LinkageModel {
    pub fn new(counts: [f64; 4]) -> Self {
        Self {
            counts,
            layout: ParamLayout {
                names: vec!["theta".into()],
                lower: vec![0.0],
                upper: vec![1.0],
                groups: vec![None],
            },
        }
    }

    /// Expected count in the `θ/4` half of the first cell.
    fn split(&self, theta: f64) -> f64 {
        self.counts[0] * (theta / 4.0) / (0.5 + theta / 4.0)
    }

    pub fn score(&self, theta: f64) -> f64 {
        let [y1, y2, y3, y4] = self.counts;
        y1 / (2.0 + theta) - (y2 + y3) / (1.0 - theta) + y4 / theta
    }

    /// MLE by bisection on the score.
    pub fn mle(&self) -> f64 {
        let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn observed_information(&self, theta: f64) -> f64 {
        let [y1, y2, y3, y4] = self.counts;
        y1 / (2.0 + theta).powi(2) + (y2 + y3) / (1.0 - theta).powi(2) + y4 / (theta * theta)
    }

    pub fn complete_information(&self, theta: f64) -> f64 {
        let [_, y2, y3, y4] = self.counts;
        (self.split(theta) + y4) / (theta * theta) + (y2 + y3) / (1.0 - theta).powi(2)
    }

    pub fn missing_information(&self, theta: f64) -> f64 {
        self.complete_information(theta) - self.observed_information(theta)
    }
}

impl EmModel for LinkageModel {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn cycle(&self, theta: &[f64]) -> Result<Vec<f64>, ModelError> {
        let [_, y2, y3, y4] = self.counts;
        let x = self.split(theta[0]);
        Ok(vec![(x + y4) / (x + y4 + y2 + y3)])
    }

    fn observed_ll(&self, theta: &[f64]) -> Result<f64, ModelError> {
        let t = theta[0];
        let [y1, y2, y3, y4] = self.counts;
        Ok(y1 * (0.5 + t / 4.0).ln() + (y2 + y3) * ((1.0 - t) / 4.0).ln() + y4 * (t / 4.0).ln())
    }

    fn complete_info(&self, theta: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        Ok(DMatrix::from_element(1, 1, self.complete_information(theta[0])))
    }

    fn is_feasible(&self, theta: &[f64]) -> bool {
        theta[0] > 0.0 && theta[0] < 1.0
    }
}

/// EM map that is exactly linear: `M(θ) = θ̂ + J(θ − θ̂)`.
///
/// The log-likelihood is the quadratic with curvature `(I − Jᵀ) I_c`,
/// shifted away from zero so relative convergence tests are meaningful.
#[derive(Debug, Clone)]
pub struct LinearMapModel {
    pub theta_hat: Vec<f64>,
    pub jacobian: DMatrix<f64>,
    pub ic: DMatrix<f64>,
    layout: ParamLayout,
}

impl LinearMapModel {
    const LL_OFFSET: f64 = -1.0;

    pub fn new(theta_hat: Vec<f64>, jacobian: DMatrix<f64>, ic: DMatrix<f64>) -> Self {
        let d = theta_hat.len();
        Self {
            theta_hat,
            jacobian,
            ic,
            layout: ParamLayout::unbounded(d),
        }
    }

    /// The map implied by complete and missing information, `J = I_c⁻¹ I_m`.
    pub fn from_information(theta_hat: Vec<f64>, ic: DMatrix<f64>, im: &DMatrix<f64>) -> Self {
        let jac = ic.clone().try_inverse().expect("complete information is invertible") * im;
        Self::new(theta_hat, jac, ic)
    }

    pub fn observed_information(&self) -> DMatrix<f64> {
        let d = self.theta_hat.len();
        (DMatrix::identity(d, d) - self.jacobian.transpose()) * &self.ic
    }

    /// `((I − Jᵀ) I_c)⁻¹`.
    pub fn closed_form_covariance(&self) -> DMatrix<f64> {
        self.observed_information().try_inverse().expect("observed information is invertible")
    }
}

impl EmModel for LinearMapModel {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn cycle(&self, theta: &[f64]) -> Result<Vec<f64>, ModelError> {
        let q = DVector::from_iterator(theta.len(), theta.iter().zip(&self.theta_hat).map(|(a, b)| a - b));
        let step = &self.jacobian * q;
        Ok(self.theta_hat.iter().zip(step.iter()).map(|(h, s)| h + s).collect())
    }

    fn observed_ll(&self, theta: &[f64]) -> Result<f64, ModelError> {
        let q = DVector::from_iterator(theta.len(), theta.iter().zip(&self.theta_hat).map(|(a, b)| a - b));
        let io = self.observed_information();
        let io = (&io + io.transpose()) * 0.5;
        Ok(Self::LL_OFFSET - 0.5 * q.dot(&(io * &q)))
    }

    fn complete_info(&self, _theta: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        Ok(self.ic.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{run_em, EmConfig, ParamVector};

    #[test]
    fn linkage_oracles() {
        let m = LinkageModel::default();
        let hat = m.mle();
        assert!((hat - 0.6268214978709824).abs() < 1e-12);
        assert!((m.complete_information(hat) - 435.3178537989656).abs() < 1e-8);
        assert!((m.observed_information(hat) - 377.51690039468724).abs() < 1e-8);
        assert!((m.missing_information(hat) - 57.8009534042784).abs() < 1e-8);
        let rate = m.missing_information(hat) / m.complete_information(hat);
        assert!((rate - 0.1327787337455989).abs() < 1e-12);
        // Central differences of the observed log-likelihood.
        let h = 1e-4;
        let ll = |t: f64| m.observed_ll(&[t]).unwrap();
        let fd = -(ll(hat + h) - 2.0 * ll(hat) + ll(hat - h)) / (h * h);
        assert!((fd / m.observed_information(hat) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn linkage_em_converges_to_the_mle() {
        let m = LinkageModel::default();
        let run = run_em(&m, &ParamVector::new(vec![0.5], m.layout().clone()).unwrap(), &EmConfig::default()).unwrap();
        assert!(run.converged);
        assert!((run.trajectory[1][0] - 0.6082474226804123).abs() < 1e-12);
        assert!((run.theta_hat.values()[0] - m.mle()).abs() < 1e-6);
        assert!(run.fixed_point_gap() < 1e-5);
        for w in run.ll_history.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn linear_map_em_is_geometric() {
        let ic = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let im = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]);
        let m = LinearMapModel::from_information(vec![1.0, -1.0], ic.clone(), &im);
        let io = m.observed_information();
        assert!((&io - (&ic - &im)).amax() < 1e-12);
        let run = run_em(&m, &ParamVector::new(vec![2.0, 0.0], m.layout().clone()).unwrap(), &EmConfig::default()).unwrap();
        assert!(run.converged);
        assert!(run.fixed_point_gap() < 1e-5);
    }
}
