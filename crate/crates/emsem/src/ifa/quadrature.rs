//! Equal-interval tensor-product quadrature over the latent space.

use super::spec::LatentDist;
use super::IfaError;

pub const DEFAULT_GRID_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub dims: usize,
    /// One-dimensional equal-interval points shared by every dimension.
    pub points: Vec<f64>,
    pub range: (f64, f64),
    /// Node coordinates, row-major `n_nodes × dims`, last dimension fastest.
    pub coords: Vec<f64>,
    /// Standard-Normal density weights renormalized to sum 1.
    pub weights: Vec<f64>,
}

pub fn build_quadrature(dims: usize, points_per_dim: usize, lo: f64, hi: f64, budget: usize) -> Result<Quadrature, IfaError> {
    if dims == 0 {
        return Err(IfaError::InvalidQuadrature("at least one dimension required".into()));
    }
    if points_per_dim < 3 || !(lo < hi) {
        return Err(IfaError::InvalidQuadrature(format!(
            "need >= 3 points and lo < hi, got {points_per_dim} on [{lo}, {hi}]"
        )));
    }
    let nodes = (points_per_dim as f64).powi(dims as i32);
    if nodes > budget as f64 {
        return Err(IfaError::GridBudgetExceeded { nodes, budget });
    }
    let step = (hi - lo) / (points_per_dim - 1) as f64;
    let points: Vec<f64> = (0..points_per_dim).map(|i| lo + step * i as f64).collect();
    let n_nodes = nodes as usize;
    let mut coords = vec![0.0; n_nodes * dims];
    for node in 0..n_nodes {
        let mut rest = node;
        for d in (0..dims).rev() {
            coords[node * dims + d] = points[rest % points_per_dim];
            rest /= points_per_dim;
        }
    }
    let mut q = Quadrature {
        dims,
        points,
        range: (lo, hi),
        coords,
        weights: vec![],
    };
    q.weights = q.log_weights(&LatentDist::standard(dims)).iter().map(|w| w.exp()).collect();
    Ok(q)
}

impl Quadrature {
    pub fn n_nodes(&self) -> usize {
        self.coords.len() / self.dims
    }

    pub fn points_per_dim(&self) -> usize {
        self.points.len()
    }

    pub fn spacing(&self) -> f64 {
        self.points[1] - self.points[0]
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dims..(i + 1) * self.dims]
    }

    /// Index of node `i`'s coordinate along dimension `d` in `points`.
    pub fn point_index(&self, node: usize, d: usize) -> usize {
        let q = self.points_per_dim();
        (node / q.pow((self.dims - 1 - d) as u32)) % q
    }

    /// Log of the discretized Normal(mean, var) weights over `points`, normalized.
    pub fn marginal_log_weights(&self, mean: f64, var: f64) -> Vec<f64> {
        let h: Vec<f64> = self.points.iter().map(|z| -(z - mean) * (z - mean) / (2.0 * var)).collect();
        let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        h.iter().map(|v| v - lse).collect()
    }

    /// Per-node log weights under a diagonal latent distribution.
    pub fn log_weights(&self, latent: &LatentDist) -> Vec<f64> {
        self.log_weights_from(&latent.mean, &latent.var)
    }

    pub fn log_weights_from(&self, mean: &[f64], var: &[f64]) -> Vec<f64> {
        let marg: Vec<Vec<f64>> = (0..self.dims).map(|d| self.marginal_log_weights(mean[d], var[d])).collect();
        (0..self.n_nodes())
            .map(|node| (0..self.dims).map(|d| marg[d][self.point_index(node, d)]).sum())
            .collect()
    }
}
