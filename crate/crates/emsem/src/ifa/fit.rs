//! Bock–Aitkin marginal maximum likelihood as an [`EmModel`].
//!
//! The E-step integrates each response pattern over a fixed equal-interval
//! grid whose weights are the discretized latent density. The M-step solves
//! the expected complete-data likelihood by Newton's method, jointly over
//! items that share equality-constrained parameters, and updates free latent
//! means and variances by maximizing the discretized latent density against
//! the expected node counts.

use nalgebra::{DMatrix, DVector};

use super::data::ResponseData;
use super::quadrature::{build_quadrature, Quadrature, DEFAULT_GRID_BUDGET};
use super::spec::ModelSpec;
use super::IfaError;
use crate::em::{run_em, EmConfig, EmError, EmModel, EmRun, ModelError, ParamLayout, ParamVector};

/// Smallest admissible latent variance.
const MIN_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Taken from the EM configuration when a study or the CLI builds a model.
    #[serde(skip)]
    pub mstep_rel_tolerance: f64,
    /// Points per dimension; defaults to 49 for one dimension and 21 otherwise.
    pub quad_points: Option<usize>,
    /// Symmetric Z range; defaults to 6 for one dimension and 5 otherwise.
    pub quad_range: Option<f64>,
    pub grid_budget: usize,
    pub max_newton: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mstep_rel_tolerance: 1e-12,
            quad_points: None,
            quad_range: None,
            grid_budget: DEFAULT_GRID_BUDGET,
            max_newton: 100,
        }
    }
}

impl FitConfig {
    pub fn from_em(config: &EmConfig) -> Self {
        Self {
            mstep_rel_tolerance: config.mstep_rel_tolerance,
            ..Self::default()
        }
    }

    fn quadrature(&self, dims: usize) -> Result<Quadrature, IfaError> {
        let points = self.quad_points.unwrap_or(if dims == 1 { 49 } else { 21 });
        let range = self.quad_range.unwrap_or(if dims == 1 { 6.0 } else { 5.0 });
        build_quadrature(dims, points, -range, range, self.grid_budget)
    }
}

/// Expected complete data of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTables {
    /// Expected response counts per item, laid out `k * n_nodes + node`.
    pub counts: Vec<Vec<f64>>,
    /// Expected respondent mass per node.
    pub mass: Vec<f64>,
    pub post_mean: Vec<f64>,
    pub post_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepTables {
    pub groups: Vec<GroupTables>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStep {
    pub tables: EStepTables,
    /// Observed-data log-likelihood without priors.
    pub ll: f64,
    /// Sum of prior log densities.
    pub log_prior: f64,
}

impl EStep {
    pub fn penalized_ll(&self) -> f64 {
        self.ll + self.log_prior
    }
}

/// Items coupled through shared free slots, solved jointly in the M-step.
#[derive(Debug, Clone)]
struct Block {
    items: Vec<(usize, usize)>,
    slots: Vec<usize>,
}

#[derive(Debug, Clone)]
struct LatentSlots {
    mean: Vec<Option<usize>>,
    var: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct IfaModel {
    spec: ModelSpec,
    data: Vec<ResponseData>,
    quads: Vec<Quadrature>,
    layout: ParamLayout,
    item_slots: Vec<Vec<Vec<Option<usize>>>>,
    latent_slots: Vec<LatentSlots>,
    blocks: Vec<Block>,
    start: Vec<f64>,
    config: FitConfig,
}

impl IfaModel {
    pub fn new(spec: ModelSpec, data: Vec<ResponseData>, config: FitConfig) -> Result<Self, IfaError> {
        spec.validate()?;
        if data.len() != spec.groups.len() {
            return Err(IfaError::InvalidData(format!("{} data sets for {} groups", data.len(), spec.groups.len())));
        }
        for (g, d) in spec.groups.iter().zip(&data) {
            d.validate()?;
            let outcomes: Vec<usize> = g.items.iter().map(|it| it.model.outcomes()).collect();
            if d.outcomes != outcomes {
                return Err(IfaError::InvalidData(format!("data for group {} do not match its items", g.name)));
            }
        }
        let quads = spec.groups.iter().map(|g| config.quadrature(g.dims())).collect::<Result<Vec<_>, _>>()?;

        let multi = spec.groups.len() > 1;
        let mut names = Vec::new();
        let mut groups_lbl = Vec::new();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let mut start = Vec::new();
        let mut label_slot: std::collections::BTreeMap<String, usize> = Default::default();
        let mut item_slots = Vec::new();
        for g in &spec.groups {
            let mut per_item = Vec::new();
            for item in &g.items {
                let pnames = item.model.param_names();
                let mut slots = vec![None; item.params.len()];
                for (p, slot) in slots.iter_mut().enumerate() {
                    if !item.free[p] {
                        continue;
                    }
                    if let Some(label) = &item.labels[p] {
                        if let Some(&s) = label_slot.get(label) {
                            *slot = Some(s);
                            continue;
                        }
                        label_slot.insert(label.clone(), names.len());
                        names.push(label.clone());
                        groups_lbl.push(Some(label.clone()));
                    } else {
                        names.push(if multi {
                            format!("{}.{}.{}", g.name, item.name, pnames[p])
                        } else {
                            format!("{}.{}", item.name, pnames[p])
                        });
                        groups_lbl.push(None);
                    }
                    *slot = Some(start.len());
                    lower.push(f64::NEG_INFINITY);
                    upper.push(f64::INFINITY);
                    start.push(item.params[p]);
                }
                per_item.push(slots);
            }
            item_slots.push(per_item);
        }
        let mut latent_slots = Vec::new();
        for g in &spec.groups {
            let mut ls = LatentSlots {
                mean: vec![None; g.dims()],
                var: vec![None; g.dims()],
            };
            for d in 0..g.dims() {
                if g.latent.is_free_mean(d) {
                    ls.mean[d] = Some(start.len());
                    names.push(format!("{}.mean{}", g.name, d + 1));
                    groups_lbl.push(None);
                    lower.push(f64::NEG_INFINITY);
                    upper.push(f64::INFINITY);
                    start.push(g.latent.mean[d]);
                }
            }
            for d in 0..g.dims() {
                if g.latent.is_free_var(d) {
                    ls.var[d] = Some(start.len());
                    names.push(format!("{}.var{}", g.name, d + 1));
                    groups_lbl.push(None);
                    lower.push(MIN_VARIANCE);
                    upper.push(f64::INFINITY);
                    start.push(g.latent.var[d]);
                }
            }
            latent_slots.push(ls);
        }
        if start.is_empty() {
            return Err(IfaError::InvalidSpec("model has no free parameters".into()));
        }
        let blocks = build_blocks(&item_slots);
        Ok(Self {
            spec,
            data,
            quads,
            layout: ParamLayout {
                names,
                lower,
                upper,
                groups: groups_lbl,
            },
            item_slots,
            latent_slots,
            blocks,
            start,
            config,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &[ResponseData] {
        &self.data
    }

    pub fn quadrature(&self, group: usize) -> &Quadrature {
        &self.quads[group]
    }

    /// Free-parameter vector holding the spec's values.
    pub fn start_vector(&self) -> ParamVector {
        ParamVector::new(self.start.clone(), self.layout.clone()).expect("spec values satisfy the layout")
    }

    /// Free-parameter vector of another spec with the same structure (e.g. generating values).
    pub fn vector_from_spec(&self, other: &ModelSpec) -> Result<Vec<f64>, IfaError> {
        let mut v = self.start.clone();
        for (gi, g) in other.groups.iter().enumerate() {
            for (ii, item) in g.items.iter().enumerate() {
                let slots = self
                    .item_slots
                    .get(gi)
                    .and_then(|s| s.get(ii))
                    .ok_or_else(|| IfaError::InvalidSpec("spec structure differs".into()))?;
                for (p, s) in slots.iter().enumerate() {
                    if let Some(s) = s {
                        v[*s] = item.params[p];
                    }
                }
            }
            for d in 0..g.dims() {
                if let Some(s) = self.latent_slots[gi].mean[d] {
                    v[s] = g.latent.mean[d];
                }
                if let Some(s) = self.latent_slots[gi].var[d] {
                    v[s] = g.latent.var[d];
                }
            }
        }
        Ok(v)
    }

    /// Writes a free-parameter vector back into a copy of the spec.
    pub fn spec_at(&self, theta: &[f64]) -> ModelSpec {
        let mut spec = self.spec.clone();
        for (gi, g) in spec.groups.iter_mut().enumerate() {
            for (ii, item) in g.items.iter_mut().enumerate() {
                item.params = self.item_params(gi, ii, theta);
            }
            let (m, v) = self.latent_params(gi, theta);
            g.latent.mean = m;
            g.latent.var = v;
        }
        spec
    }

    pub fn fit(&self, config: &EmConfig) -> Result<EmRun, EmError> {
        run_em(self, &self.start_vector(), config)
    }

    fn check_len(&self, theta: &[f64]) -> Result<(), IfaError> {
        if theta.len() != self.layout.len() {
            return Err(IfaError::ParamLength {
                got: theta.len(),
                expected: self.layout.len(),
            });
        }
        Ok(())
    }

    fn item_params(&self, g: usize, i: usize, theta: &[f64]) -> Vec<f64> {
        let item = &self.spec.groups[g].items[i];
        item.params
            .iter()
            .zip(&self.item_slots[g][i])
            .map(|(&p, s)| s.map_or(p, |s| theta[s]))
            .collect()
    }

    fn latent_params(&self, g: usize, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let lat = &self.spec.groups[g].latent;
        let ls = &self.latent_slots[g];
        let mean = (0..lat.dims()).map(|d| ls.mean[d].map_or(lat.mean[d], |s| theta[s])).collect();
        let var = (0..lat.dims()).map(|d| ls.var[d].map_or(lat.var[d], |s| theta[s])).collect();
        (mean, var)
    }

    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        let mut total = 0.0;
        for (g, group) in self.spec.groups.iter().enumerate() {
            for (i, item) in group.items.iter().enumerate() {
                for (p, prior) in item.priors.iter().enumerate() {
                    if let (Some(prior), Some(s)) = (prior, self.item_slots[g][i][p]) {
                        total += prior.log_density(theta[s]);
                    }
                }
            }
        }
        total
    }

    /// log P tables per item, laid out `k * n_nodes + node`.
    fn log_prob_tables(&self, g: usize, theta: &[f64]) -> Vec<Vec<f64>> {
        let quad = &self.quads[g];
        let nn = quad.n_nodes();
        self.spec.groups[g]
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let params = self.item_params(g, i, theta);
                let k = item.model.outcomes();
                let mut table = vec![0.0; k * nn];
                let mut probs = vec![0.0; k];
                for node in 0..nn {
                    item.model.probs(&params, quad.node(node), &mut probs);
                    for (c, p) in probs.iter().enumerate() {
                        table[c * nn + node] = p.ln();
                    }
                }
                table
            })
            .collect()
    }

    /// Runs the E-step of one group. With `tables` absent only the likelihood is computed.
    fn group_e_step(&self, g: usize, theta: &[f64], mut tables: Option<&mut GroupTables>) -> Result<f64, IfaError> {
        let quad = &self.quads[g];
        let nn = quad.n_nodes();
        let (mean, var) = self.latent_params(g, theta);
        let lw = quad.log_weights_from(&mean, &var);
        let logp = self.log_prob_tables(g, theta);
        let data = &self.data[g];
        let mut ll = 0.0;
        let mut work = vec![0.0; nn];
        for (pi, (pattern, &freq)) in data.patterns.iter().zip(&data.freq).enumerate() {
            work.copy_from_slice(&lw);
            for (i, r) in pattern.iter().enumerate() {
                if let Some(k) = r {
                    let row = &logp[i][k * nn..(k + 1) * nn];
                    for (w, l) in work.iter_mut().zip(row) {
                        *w += l;
                    }
                }
            }
            let m = work.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(IfaError::NonFinitePattern { pattern: pi });
            }
            let mut s = 0.0;
            for w in work.iter_mut() {
                *w = (*w - m).exp();
                s += *w;
            }
            ll += freq * (m + s.ln());
            if let Some(t) = tables.as_deref_mut() {
                let scale = freq / s;
                for w in work.iter_mut() {
                    *w *= scale;
                }
                for (acc, w) in t.mass.iter_mut().zip(&work) {
                    *acc += w;
                }
                for (i, r) in pattern.iter().enumerate() {
                    if let Some(k) = r {
                        let row = &mut t.counts[i][k * nn..(k + 1) * nn];
                        for (acc, w) in row.iter_mut().zip(&work) {
                            *acc += w;
                        }
                    }
                }
            }
        }
        if let Some(t) = tables {
            let total: f64 = t.mass.iter().sum();
            for d in 0..quad.dims {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for node in 0..nn {
                    let z = quad.node(node)[d];
                    m1 += t.mass[node] * z;
                    m2 += t.mass[node] * z * z;
                }
                let mu = if total > 0.0 { m1 / total } else { 0.0 };
                t.post_mean[d] = mu;
                t.post_var[d] = if total > 0.0 { m2 / total - mu * mu } else { 0.0 };
            }
        }
        Ok(ll)
    }

    pub fn e_step(&self, theta: &[f64]) -> Result<EStep, IfaError> {
        self.check_len(theta)?;
        let mut groups = Vec::with_capacity(self.spec.groups.len());
        let mut ll = 0.0;
        for (g, group) in self.spec.groups.iter().enumerate() {
            let nn = self.quads[g].n_nodes();
            let mut t = GroupTables {
                counts: group.items.iter().map(|it| vec![0.0; it.model.outcomes() * nn]).collect(),
                mass: vec![0.0; nn],
                post_mean: vec![0.0; group.dims()],
                post_var: vec![0.0; group.dims()],
            };
            ll += self.group_e_step(g, theta, Some(&mut t))?;
            groups.push(t);
        }
        Ok(EStep {
            tables: EStepTables { groups },
            ll,
            log_prior: self.log_prior(theta),
        })
    }

    /// Observed-data log-likelihood without priors.
    pub fn data_ll(&self, theta: &[f64]) -> Result<f64, IfaError> {
        self.check_len(theta)?;
        let mut ll = 0.0;
        for g in 0..self.spec.groups.len() {
            ll += self.group_e_step(g, theta, None)?;
        }
        Ok(ll)
    }

    fn block_feasible(&self, block: &Block, theta: &[f64]) -> bool {
        block
            .items
            .iter()
            .all(|&(g, i)| self.spec.groups[g].items[i].model.params_feasible(&self.item_params(g, i, theta)))
    }

    /// Expected complete-data log-likelihood of a block (with priors), its gradient and Hessian
    /// over the block's slots.
    fn block_objective(&self, block: &Block, tables: &EStepTables, theta: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let nb = block.slots.len();
        let mut obj = 0.0;
        let mut grad = DVector::zeros(nb);
        let mut hess = DMatrix::zeros(nb, nb);
        for &(g, i) in &block.items {
            let item = &self.spec.groups[g].items[i];
            let quad = &self.quads[g];
            let nn = quad.n_nodes();
            let params = self.item_params(g, i, theta);
            let np = params.len();
            let local: Vec<Option<usize>> = self.item_slots[g][i]
                .iter()
                .map(|s| s.map(|s| block.slots.binary_search(&s).expect("slot belongs to block")))
                .collect();
            let counts = &tables.groups[g].counts[i];
            let mut ig = vec![0.0; np];
            let mut ih = vec![0.0; np * np];
            for node in 0..nn {
                let tau = quad.node(node);
                for k in 0..item.model.outcomes() {
                    let c = counts[k * nn + node];
                    if c == 0.0 {
                        continue;
                    }
                    let lp = item.model.log_prob_derivs(&params, tau, k, &mut ig, &mut ih);
                    obj += c * lp;
                    for p in 0..np {
                        let Some(lp_) = local[p] else { continue };
                        grad[lp_] += c * ig[p];
                        for q in 0..np {
                            if let Some(lq) = local[q] {
                                hess[(lp_, lq)] += c * ih[p * np + q];
                            }
                        }
                    }
                }
            }
            for (p, prior) in item.priors.iter().enumerate() {
                if let (Some(prior), Some(l)) = (prior, local[p]) {
                    let x = params[p];
                    obj += prior.log_density(x);
                    grad[l] -= (x - prior.mean) / (prior.sd * prior.sd);
                    hess[(l, l)] -= 1.0 / (prior.sd * prior.sd);
                }
            }
        }
        (obj, grad, hess)
    }

    /// Marginal expected counts over the 1-D grid for dimension `d`.
    fn marginal_counts(&self, g: usize, tables: &EStepTables, d: usize) -> Vec<f64> {
        let quad = &self.quads[g];
        let mut out = vec![0.0; quad.points_per_dim()];
        for (node, m) in tables.groups[g].mass.iter().enumerate() {
            out[quad.point_index(node, d)] += m;
        }
        out
    }

    /// Σ_p n_p log w_p(mean, var) with gradient and Hessian in (mean, var).
    fn latent_objective(points: &[f64], counts: &[f64], mean: f64, var: f64) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let total: f64 = counts.iter().sum();
        let h: Vec<f64> = points.iter().map(|z| -(z - mean) * (z - mean) / (2.0 * var)).collect();
        let hmax = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = h.iter().map(|v| (v - hmax).exp()).collect();
        let es: f64 = e.iter().sum();
        let lse = hmax + es.ln();
        let mut obj = 0.0;
        let mut g = [0.0; 2];
        let mut hs = [[0.0; 2]; 2];
        // Expectations under the discretized weights.
        let mut eg = [0.0; 2];
        let mut egg = [[0.0; 2]; 2];
        let mut eh = [[0.0; 2]; 2];
        for (p, &z) in points.iter().enumerate() {
            let dz = z - mean;
            let d1 = [dz / var, dz * dz / (2.0 * var * var)];
            let d2 = [[-1.0 / var, -dz / (var * var)], [-dz / (var * var), -dz * dz / (var * var * var)]];
            let n = counts[p];
            obj += n * (h[p] - lse);
            let w = e[p] / es;
            for a in 0..2 {
                g[a] += n * d1[a];
                eg[a] += w * d1[a];
                for b in 0..2 {
                    hs[a][b] += n * d2[a][b];
                    eh[a][b] += w * d2[a][b];
                    egg[a][b] += w * d1[a] * d1[b];
                }
            }
        }
        for a in 0..2 {
            g[a] -= total * eg[a];
            for b in 0..2 {
                hs[a][b] -= total * (eh[a][b] + egg[a][b] - eg[a] * eg[b]);
            }
        }
        (obj, g, hs)
    }

    pub fn m_step(&self, tables: &EStepTables, theta: &[f64]) -> Result<Vec<f64>, IfaError> {
        self.check_len(theta)?;
        let mut out = theta.to_vec();
        let tol = self.config.mstep_rel_tolerance;
        for (bi, block) in self.blocks.iter().enumerate() {
            let x0: Vec<f64> = block.slots.iter().map(|&s| theta[s]).collect();
            let mut work = theta.to_vec();
            let x = newton_maximize(x0, tol, self.config.max_newton, |x| {
                for (s, v) in block.slots.iter().zip(x) {
                    work[*s] = *v;
                }
                if !self.block_feasible(block, &work) {
                    return None;
                }
                Some(self.block_objective(block, tables, &work))
            })
            .ok_or(IfaError::MStepDivergence { block: bi })?;
            for (s, v) in block.slots.iter().zip(x) {
                out[*s] = v;
            }
        }
        for (g, ls) in self.latent_slots.iter().enumerate() {
            let (mean, var) = self.latent_params(g, theta);
            for d in 0..mean.len() {
                let free = [ls.mean[d], ls.var[d]];
                if free.iter().all(Option::is_none) {
                    continue;
                }
                let counts = self.marginal_counts(g, tables, d);
                let points = &self.quads[g].points;
                let active: Vec<usize> = (0..2).filter(|&a| free[a].is_some()).collect();
                let x0: Vec<f64> = active.iter().map(|&a| if a == 0 { mean[d] } else { var[d] }).collect();
                let x = newton_maximize(x0, tol, self.config.max_newton, |x| {
                    let mut mv = [mean[d], var[d]];
                    for (a, v) in active.iter().zip(x) {
                        mv[*a] = *v;
                    }
                    if !(mv[1] >= MIN_VARIANCE) {
                        return None;
                    }
                    let (o, g2, h2) = Self::latent_objective(points, &counts, mv[0], mv[1]);
                    let n = active.len();
                    let grad = DVector::from_fn(n, |r, _| g2[active[r]]);
                    let hess = DMatrix::from_fn(n, n, |r, c| h2[active[r]][active[c]]);
                    Some((o, grad, hess))
                })
                .ok_or(IfaError::MStepDivergence { block: self.blocks.len() + g })?;
                for (a, v) in active.iter().zip(x) {
                    out[free[*a].unwrap()] = v;
                }
            }
        }
        Ok(out)
    }

    /// Negative Hessian of the expected complete-data log-likelihood (with prior curvature).
    pub fn complete_information(&self, theta: &[f64]) -> Result<DMatrix<f64>, IfaError> {
        let estep = self.e_step(theta)?;
        let d = self.layout.len();
        let mut info = DMatrix::zeros(d, d);
        for block in &self.blocks {
            let (_, _, h) = self.block_objective(block, &estep.tables, theta);
            for (a, &sa) in block.slots.iter().enumerate() {
                for (b, &sb) in block.slots.iter().enumerate() {
                    info[(sa, sb)] -= h[(a, b)];
                }
            }
        }
        for (g, ls) in self.latent_slots.iter().enumerate() {
            let (mean, var) = self.latent_params(g, theta);
            for dd in 0..mean.len() {
                let free = [ls.mean[dd], ls.var[dd]];
                if free.iter().all(Option::is_none) {
                    continue;
                }
                let counts = self.marginal_counts(g, &estep.tables, dd);
                let (_, _, h) = Self::latent_objective(&self.quads[g].points, &counts, mean[dd], var[dd]);
                for a in 0..2 {
                    for b in 0..2 {
                        if let (Some(sa), Some(sb)) = (free[a], free[b]) {
                            info[(sa, sb)] -= h[a][b];
                        }
                    }
                }
            }
        }
        Ok((&info + info.transpose()) * 0.5)
    }

    /// Cross-product of per-pattern observed-data gradients, Σ freq · g gᵀ.
    ///
    /// Used to screen unidentified fits by its condition number.
    pub fn gradient_crossproduct(&self, theta: &[f64]) -> Result<DMatrix<f64>, IfaError> {
        self.check_len(theta)?;
        let d = self.layout.len();
        let mut out = DMatrix::zeros(d, d);
        for (g, group) in self.spec.groups.iter().enumerate() {
            let quad = &self.quads[g];
            let nn = quad.n_nodes();
            let (mean, var) = self.latent_params(g, theta);
            let lw = quad.log_weights_from(&mean, &var);
            let logp = self.log_prob_tables(g, theta);
            // Per item and outcome: node-major gradients over the item's parameters.
            let grads: Vec<Vec<Vec<f64>>> = group
                .items
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    let params = self.item_params(g, i, theta);
                    let np = params.len();
                    let mut ig = vec![0.0; np];
                    let mut ih = vec![0.0; np * np];
                    (0..item.model.outcomes())
                        .map(|k| {
                            let mut v = vec![0.0; nn * np];
                            for node in 0..nn {
                                item.model.log_prob_derivs(&params, quad.node(node), k, &mut ig, &mut ih);
                                v[node * np..(node + 1) * np].copy_from_slice(&ig);
                            }
                            v
                        })
                        .collect()
                })
                .collect();
            // Latent score per node for each free mean/var.
            let ls = &self.latent_slots[g];
            let mut latent_scores: Vec<(usize, Vec<f64>)> = Vec::new();
            for dd in 0..mean.len() {
                let marg = quad.marginal_log_weights(mean[dd], var[dd]);
                let w: Vec<f64> = marg.iter().map(|v| v.exp()).collect();
                let d_mean: Vec<f64> = quad.points.iter().map(|z| (z - mean[dd]) / var[dd]).collect();
                let d_var: Vec<f64> = quad
                    .points
                    .iter()
                    .map(|z| (z - mean[dd]) * (z - mean[dd]) / (2.0 * var[dd] * var[dd]))
                    .collect();
                for (slot, raw) in [(ls.mean[dd], d_mean), (ls.var[dd], d_var)] {
                    let Some(slot) = slot else { continue };
                    let centre: f64 = raw.iter().zip(&w).map(|(a, b)| a * b).sum();
                    let per_node = (0..nn).map(|node| raw[quad.point_index(node, dd)] - centre).collect();
                    latent_scores.push((slot, per_node));
                }
            }
            let data = &self.data[g];
            let mut work = vec![0.0; nn];
            let mut score = DVector::zeros(d);
            for (pi, (pattern, &freq)) in data.patterns.iter().zip(&data.freq).enumerate() {
                work.copy_from_slice(&lw);
                for (i, r) in pattern.iter().enumerate() {
                    if let Some(k) = r {
                        for (w, l) in work.iter_mut().zip(&logp[i][k * nn..(k + 1) * nn]) {
                            *w += l;
                        }
                    }
                }
                let m = work.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !m.is_finite() {
                    return Err(IfaError::NonFinitePattern { pattern: pi });
                }
                let mut s = 0.0;
                for w in work.iter_mut() {
                    *w = (*w - m).exp();
                    s += *w;
                }
                score.fill(0.0);
                for (i, r) in pattern.iter().enumerate() {
                    let Some(k) = r else { continue };
                    let slots = &self.item_slots[g][i];
                    let np = slots.len();
                    let gk = &grads[i][*k];
                    for node in 0..nn {
                        let post = work[node] / s;
                        for (p, slot) in slots.iter().enumerate() {
                            if let Some(slot) = slot {
                                score[*slot] += post * gk[node * np + p];
                            }
                        }
                    }
                }
                for (slot, per_node) in &latent_scores {
                    score[*slot] += per_node.iter().zip(&work).map(|(a, w)| a * w / s).sum::<f64>();
                }
                out.ger(freq, &score, &score, 1.0);
            }
        }
        Ok(out)
    }
}

/// Damped Newton ascent. `eval` returns `None` for infeasible points.
///
/// Stops once the relative objective change drops below `tol` and the step is
/// negligible; returns `None` when no ascent step can be found.
fn newton_maximize<F>(mut x: Vec<f64>, tol: f64, max_iter: usize, mut eval: F) -> Option<Vec<f64>>
where
    F: FnMut(&[f64]) -> Option<(f64, DVector<f64>, DMatrix<f64>)>,
{
    let (mut f, mut g, mut h) = eval(&x)?;
    if !f.is_finite() {
        return None;
    }
    let n = x.len();
    for _ in 0..max_iter {
        let step = newton_direction(&g, &h);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + scale * s).collect();
            if let Some((fnew, gnew, hnew)) = eval(&xn) {
                if fnew.is_finite() && fnew >= f - 1e-14 * f.abs() {
                    accepted = Some((xn, fnew, gnew, hnew));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((xn, fnew, gnew, hnew)) = accepted else {
            // No ascent along the Newton direction: accept when already stationary.
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return (gmax <= 1e-8 * f.abs().max(1.0)).then_some(x);
        };
        let full = scale == 1.0;
        let rel = if f != 0.0 { ((fnew - f) / f).abs() } else { (fnew - f).abs() };
        let dx = (0..n).map(|i| (xn[i] - x[i]).abs()).fold(0.0, f64::max);
        x = xn;
        f = fnew;
        g = gnew;
        h = hnew;
        // A heavily damped step says little about convergence.
        if full && rel < tol && dx < 1e-9 {
            return Some(x);
        }
    }
    Some(x)
}

/// Solves (−H) δ = g, shifting −H toward positive definiteness when needed.
fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> DVector<f64> {
    let neg = -h;
    if let Some(ch) = neg.clone().cholesky() {
        return ch.solve(g);
    }
    let n = g.len();
    let base = (0..n).map(|i| neg[(i, i)].abs()).fold(1e-8, f64::max);
    let mut lambda = 1e-6 * base;
    for _ in 0..40 {
        let shifted = &neg + DMatrix::identity(n, n) * lambda;
        if let Some(ch) = shifted.cholesky() {
            return ch.solve(g);
        }
        lambda *= 10.0;
    }
    g / base
}

fn build_blocks(item_slots: &[Vec<Vec<Option<usize>>>]) -> Vec<Block> {
    let items: Vec<(usize, usize)> = item_slots.iter().enumerate().flat_map(|(g, its)| (0..its.len()).map(move |i| (g, i))).collect();
    let n = items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    let mut owner: std::collections::BTreeMap<usize, usize> = Default::default();
    for (idx, &(g, i)) in items.iter().enumerate() {
        for s in item_slots[g][i].iter().flatten() {
            match owner.get(s) {
                Some(&o) => {
                    let (a, b) = (find(&mut parent, o), find(&mut parent, idx));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
                None => {
                    owner.insert(*s, idx);
                }
            }
        }
    }
    let mut blocks: std::collections::BTreeMap<usize, Block> = Default::default();
    for (idx, &(g, i)) in items.iter().enumerate() {
        let root = find(&mut parent, idx);
        let b = blocks.entry(root).or_insert_with(|| Block { items: vec![], slots: vec![] });
        b.items.push((g, i));
        b.slots.extend(item_slots[g][i].iter().flatten().copied());
    }
    blocks
        .into_values()
        .filter_map(|mut b| {
            b.slots.sort_unstable();
            b.slots.dedup();
            (!b.slots.is_empty()).then_some(b)
        })
        .collect()
}

impl EmModel for IfaModel {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn cycle(&self, theta: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.cycle_with_ll(theta)?.0)
    }

    fn observed_ll(&self, theta: &[f64]) -> Result<f64, ModelError> {
        Ok(self.data_ll(theta)? + self.log_prior(theta))
    }

    fn complete_info(&self, theta: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        Ok(self.complete_information(theta)?)
    }

    fn cycle_with_ll(&self, theta: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
        let estep = self.e_step(theta)?;
        let next = self.m_step(&estep.tables, theta)?;
        Ok((next, estep.penalized_ll()))
    }

    fn is_feasible(&self, theta: &[f64]) -> bool {
        self.layout.contains(theta) && self.blocks.iter().all(|b| self.block_feasible(b, theta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifa::data::sample_responses;
    use crate::ifa::spec::{builtin_spec, GaussianPrior, GroupSpec, ItemSpec, LatentDist};

    fn small_model(seed: u64) -> IfaModel {
        let b = builtin_spec("m2pl5").unwrap();
        let data = sample_responses(&b.generating.groups, seed).unwrap();
        IfaModel::new(b.starting, data, FitConfig::default()).unwrap()
    }

    fn direct_ll(model: &IfaModel, theta: &[f64]) -> f64 {
        // Σ_patterns freq · log Σ_nodes w · Π_items P, evaluated without logs inside the product.
        let spec = model.spec_at(theta);
        let mut ll = 0.0;
        for (g, group) in spec.groups.iter().enumerate() {
            let quad = model.quadrature(g);
            let w: Vec<f64> = quad.log_weights(&group.latent).iter().map(|v| v.exp()).collect();
            for (pattern, freq) in model.data()[g].patterns.iter().zip(&model.data()[g].freq) {
                let mut total = 0.0;
                for node in 0..quad.n_nodes() {
                    let mut prod = w[node];
                    for (item, r) in group.items.iter().zip(pattern) {
                        if let Some(k) = r {
                            let mut p = vec![0.0; item.model.outcomes()];
                            item.model.probs(&item.params, quad.node(node), &mut p);
                            prod *= p[*k];
                        }
                    }
                    total += prod;
                }
                ll += freq * total.ln();
            }
        }
        ll
    }

    #[test]
    fn observed_ll_matches_direct_summation() {
        let m = small_model(3);
        let theta = m.start_vector().values().to_vec();
        let e = m.e_step(&theta).unwrap();
        let direct = direct_ll(&m, &theta);
        assert!((e.ll - direct).abs() < 1e-10 * direct.abs().max(1.0), "{} vs {direct}", e.ll);
        assert_eq!(e.ll, m.data_ll(&theta).unwrap());
    }

    #[test]
    fn doubling_frequencies_doubles_ll() {
        let m = small_model(4);
        let doubled = IfaModel::new(m.spec().clone(), vec![m.data()[0].scaled(2.0)], FitConfig::default()).unwrap();
        let theta = m.start_vector().values().to_vec();
        assert_eq!(doubled.data_ll(&theta).unwrap(), 2.0 * m.data_ll(&theta).unwrap());
    }

    #[test]
    fn single_item_posterior_is_bayes_rule() {
        let spec = ModelSpec {
            name: "one".into(),
            groups: vec![GroupSpec {
                name: "g".into(),
                sample_size: 1,
                latent: LatentDist::standard(1),
                items: vec![ItemSpec::dichotomous("i", &[1.0], 0.0, f64::NEG_INFINITY)],
            }],
        };
        let data = ResponseData::from_rows(vec!["i".into()], vec![2], vec![(vec![Some(1)], 1.0)]).unwrap();
        let m = IfaModel::new(spec, vec![data], FitConfig::default()).unwrap();
        let e = m.e_step(&[1.0, 0.0]).unwrap();
        let q = m.quadrature(0);
        let unnorm: Vec<f64> = (0..q.n_nodes()).map(|n| q.weights[n] * crate::ifa::logistic(q.points[n])).collect();
        let s: f64 = unnorm.iter().sum();
        for n in 0..q.n_nodes() {
            assert!((e.tables.groups[0].mass[n] - unnorm[n] / s).abs() < 1e-15);
            assert_eq!(e.tables.groups[0].counts[0][q.n_nodes() + n], e.tables.groups[0].mass[n]);
        }
    }

    #[test]
    fn mass_is_conserved() {
        let m = small_model(5);
        let e = m.e_step(m.start_vector().values()).unwrap();
        let total: f64 = e.tables.groups[0].mass.iter().sum();
        assert!((total - 1000.0).abs() < 1e-8 * 1000.0);
        for c in &e.tables.groups[0].counts {
            let nn = m.quadrature(0).n_nodes();
            for node in 0..nn {
                let s = c[node] + c[nn + node];
                assert!((s - e.tables.groups[0].mass[node]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn m_step_is_fixed_at_stationary_tables() {
        let m = small_model(6);
        let run = m.fit(&EmConfig::default()).unwrap();
        assert!(run.converged);
        let hat = run.theta_hat.values();
        let e = m.e_step(hat).unwrap();
        let next = m.m_step(&e.tables, hat).unwrap();
        // A second M-step from the solution stays put.
        let again = m.m_step(&e.tables, &next).unwrap();
        for (a, b) in again.iter().zip(&next) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Intercept-only logistic regression at one node, solved by bisection on the score.
    #[test]
    fn m_step_matches_bisection_on_single_node() {
        let mut item = ItemSpec::dichotomous("i", &[0.8], 0.1, f64::NEG_INFINITY);
        item.free[0] = false;
        let spec = ModelSpec {
            name: "x".into(),
            groups: vec![GroupSpec {
                name: "g".into(),
                sample_size: 10,
                latent: LatentDist::standard(1),
                items: vec![item],
            }],
        };
        let data = ResponseData::from_rows(vec!["i".into()], vec![2], vec![(vec![Some(1)], 7.0), (vec![Some(0)], 3.0)]).unwrap();
        let m = IfaModel::new(spec, vec![data], FitConfig::default()).unwrap();
        let nn = m.quadrature(0).n_nodes();
        let node = 30;
        let tau = m.quadrature(0).points[node];
        let mut counts = vec![0.0; 2 * nn];
        counts[node] = 3.3;
        counts[nn + node] = 6.7;
        let mut mass = vec![0.0; nn];
        mass[node] = 10.0;
        let tables = EStepTables {
            groups: vec![GroupTables {
                counts: vec![counts],
                mass,
                post_mean: vec![tau],
                post_var: vec![0.0],
            }],
        };
        let next = m.m_step(&tables, &[0.0]).unwrap();
        let score = |c: f64| 6.7 - 10.0 * crate::ifa::logistic(0.8 * tau + c);
        let (mut lo, mut hi) = (-20.0, 20.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((next[0] - 0.5 * (lo + hi)).abs() < 1e-8);
    }

    #[test]
    fn flat_prior_reproduces_unpenalized_update() {
        let b = builtin_spec("m2pl5").unwrap();
        let data = sample_responses(&b.generating.groups, 11).unwrap();
        let plain = IfaModel::new(b.starting.clone(), data.clone(), FitConfig::default()).unwrap();
        let mut spec = b.starting.clone();
        for item in &mut spec.groups[0].items {
            item.priors[1] = Some(GaussianPrior { mean: 0.0, sd: 1e12 });
        }
        let wide = IfaModel::new(spec, data, FitConfig::default()).unwrap();
        let theta = plain.start_vector().values().to_vec();
        let a = plain.cycle(&theta).unwrap();
        let b2 = wide.cycle(&theta).unwrap();
        for (x, y) in a.iter().zip(&b2) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn complete_info_matches_finite_differences_of_q() {
        let m = small_model(8);
        let run = m.fit(&EmConfig::default()).unwrap();
        let hat = run.theta_hat.values().to_vec();
        let ic = m.complete_information(&hat).unwrap();
        assert_eq!(ic, ic.transpose());
        let e = m.e_step(&hat).unwrap();
        let block = &m.blocks[2];
        let h = 1e-4;
        let q = |x: &[f64]| m.block_objective(block, &e.tables, x).0;
        for &a in &block.slots {
            for &b in &block.slots {
                let mut pp = hat.clone();
                let mut pm = hat.clone();
                let mut mp = hat.clone();
                let mut mm = hat.clone();
                pp[a] += h;
                pp[b] += h;
                pm[a] += h;
                pm[b] -= h;
                mp[a] -= h;
                mp[b] += h;
                mm[a] -= h;
                mm[b] -= h;
                let fd = -(q(&pp) - q(&pm) - q(&mp) + q(&mm)) / (4.0 * h * h);
                assert!((fd - ic[(a, b)]).abs() < 1e-4 * ic[(a, b)].abs().max(1.0), "({a},{b}) {fd} vs {}", ic[(a, b)]);
            }
        }
        assert!(ic.clone().cholesky().is_some());
    }

    #[test]
    fn cycle_is_pure() {
        let m = small_model(9);
        let theta = m.start_vector().values().to_vec();
        let a = m.cycle(&theta).unwrap();
        let b = m.cycle(&theta).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn equality_constrained_slopes_share_a_slot() {
        let b = builtin_spec("m3pl15").unwrap();
        let data = sample_responses(&b.generating.groups, 1).unwrap();
        let m = IfaModel::new(b.starting, data, FitConfig::default()).unwrap();
        assert_eq!(m.dim(), 31);
        assert_eq!(m.blocks.len(), 1);
        assert_eq!(m.layout().names[0], "slope");
        let run = m
            .fit(&EmConfig {
                max_iterations: 200,
                ..EmConfig::default()
            })
            .unwrap();
        for w in run.ll_history.windows(2) {
            assert!(w[1] >= w[0] - 10.0 * 1e-11 * w[0].abs());
        }
    }

    #[test]
    fn cyh1_grid_is_out_of_budget() {
        let b = builtin_spec("cyh1").unwrap();
        let data = sample_responses(&b.generating.groups, 1).unwrap();
        assert!(matches!(
            IfaModel::new(b.starting, data, FitConfig::default()),
            Err(IfaError::GridBudgetExceeded { .. })
        ));
    }

    #[test]
    fn two_group_model_with_free_latent_moments() {
        // Group 2 shares items with group 1 and estimates its latent mean and variance.
        let items: Vec<ItemSpec> = (0..6)
            .map(|i| {
                let mut it = ItemSpec::dichotomous(format!("i{i}"), &[1.0 + 0.2 * i as f64], 0.4 - 0.2 * i as f64, f64::NEG_INFINITY);
                it.labels[0] = Some(format!("i{i}.a"));
                it.labels[1] = Some(format!("i{i}.c"));
                it
            })
            .collect();
        let mut latent2 = LatentDist::standard(1);
        latent2.mean[0] = 0.5;
        latent2.var[0] = 1.5;
        latent2.free_mean = vec![true];
        latent2.free_var = vec![true];
        let generating = ModelSpec {
            name: "two".into(),
            groups: vec![
                GroupSpec {
                    name: "g1".into(),
                    sample_size: 3000,
                    latent: LatentDist::standard(1),
                    items: items.clone(),
                },
                GroupSpec {
                    name: "g2".into(),
                    sample_size: 3000,
                    latent: latent2,
                    items: items[..4].to_vec(),
                },
            ],
        };
        let mut start = generating.clone();
        start.groups[1].latent.mean[0] = 0.0;
        start.groups[1].latent.var[0] = 1.0;
        let data = sample_responses(&generating.groups, 77).unwrap();
        let m = IfaModel::new(start, data, FitConfig::default()).unwrap();
        assert_eq!(m.dim(), 14);
        let run = m.fit(&EmConfig::default()).unwrap();
        assert!(run.converged);
        let hat = run.theta_hat.values();
        assert!((hat[12] - 0.5).abs() < 0.15, "mean {}", hat[12]);
        assert!((hat[13] - 1.5).abs() < 0.4, "var {}", hat[13]);
        for w in run.ll_history.windows(2) {
            assert!(w[1] >= w[0] - 10.0 * 1e-11 * w[0].abs());
        }
        let ic = m.complete_information(hat).unwrap();
        assert!(ic.cholesky().is_some());
        assert!(run.fixed_point_gap() < 1e-4);
    }
}
