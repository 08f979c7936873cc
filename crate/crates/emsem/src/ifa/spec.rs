//! Model specifications: items, latent distributions, groups, and the
//! builtin simulation models.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::response::{logit, ItemModel};
use super::IfaError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub sd: f64,
}

impl GaussianPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// One item: response model, parameter values, free flags, equality labels and priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ItemEntry", into = "ItemEntry")]
pub struct ItemSpec {
    pub name: String,
    pub model: ItemModel,
    pub params: Vec<f64>,
    pub free: Vec<bool>,
    pub labels: Vec<Option<String>>,
    pub priors: Vec<Option<GaussianPrior>>,
}

impl ItemSpec {
    /// All finite parameters free, no labels or priors.
    pub fn new(name: impl Into<String>, model: ItemModel, params: Vec<f64>) -> Self {
        let n = params.len();
        Self {
            name: name.into(),
            free: params.iter().map(|p| p.is_finite()).collect(),
            model,
            params,
            labels: vec![None; n],
            priors: vec![None; n],
        }
    }

    pub fn dichotomous(name: impl Into<String>, slopes: &[f64], c: f64, g: f64) -> Self {
        let mut params = slopes.to_vec();
        params.push(c);
        params.push(g);
        Self::new(name, ItemModel::Dichotomous { factors: slopes.len() }, params)
    }

    pub fn graded(name: impl Into<String>, slopes: &[f64], intercepts: &[f64]) -> Self {
        let mut params = slopes.to_vec();
        params.extend_from_slice(intercepts);
        Self::new(
            name,
            ItemModel::Graded {
                factors: slopes.len(),
                outcomes: intercepts.len() + 1,
            },
            params,
        )
    }

    pub fn param_index(&self, short: &str) -> Option<usize> {
        self.model.param_names().iter().position(|n| n == short)
    }

    pub fn validate(&self) -> Result<(), IfaError> {
        self.model.validate()?;
        let n = self.model.n_params();
        if self.params.len() != n || self.free.len() != n || self.labels.len() != n || self.priors.len() != n {
            return Err(IfaError::InvalidSpec(format!("item {} must carry {n} parameters", self.name)));
        }
        if !self.model.params_feasible(&self.params) {
            return Err(IfaError::InvalidSpec(format!("item {} intercepts must be strictly ordered", self.name)));
        }
        for (i, p) in self.params.iter().enumerate() {
            if self.free[i] && !p.is_finite() {
                return Err(IfaError::InvalidSpec(format!("item {}: free parameter must be finite", self.name)));
            }
            if let Some(pr) = self.priors[i] {
                if !(pr.sd > 0.0) {
                    return Err(IfaError::InvalidSpec(format!("item {}: prior sd must be positive", self.name)));
                }
            }
        }
        Ok(())
    }
}

/// Serialized form of an item in a model-spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ItemEntry {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outcomes: Option<usize>,
    slopes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    intercepts: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    ta: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tc: Vec<Vec<f64>>,
    /// Names of fixed parameters (`a1`, `c`, `g`, `c2`, `alpha1`, ...). Non-finite values are always fixed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    fixed: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    priors: BTreeMap<String, GaussianPrior>,
}

impl TryFrom<ItemEntry> for ItemSpec {
    type Error = IfaError;

    fn try_from(e: ItemEntry) -> Result<Self, IfaError> {
        let f = e.slopes.len();
        let (model, params) = match e.kind.as_str() {
            "dichotomous" => {
                if e.intercepts.len() != 1 {
                    return Err(IfaError::InvalidSpec(format!("item {}: dichotomous needs one intercept", e.name)));
                }
                let mut p = e.slopes.clone();
                p.push(e.intercepts[0]);
                p.push(e.g.unwrap_or(f64::NEG_INFINITY));
                (ItemModel::Dichotomous { factors: f }, p)
            }
            "graded" => {
                let outcomes = e.outcomes.unwrap_or(e.intercepts.len() + 1);
                if outcomes != e.intercepts.len() + 1 {
                    return Err(IfaError::InvalidSpec(format!("item {}: graded needs K-1 intercepts", e.name)));
                }
                let mut p = e.slopes.clone();
                p.extend_from_slice(&e.intercepts);
                (ItemModel::Graded { factors: f, outcomes }, p)
            }
            "nominal" => {
                let outcomes = e.outcomes.unwrap_or(e.alpha.len() + 1);
                if e.alpha.len() != outcomes - 1 || e.gamma.len() != outcomes - 1 {
                    return Err(IfaError::InvalidSpec(format!("item {}: nominal needs K-1 alpha and gamma", e.name)));
                }
                let mut p = e.slopes.clone();
                p.extend_from_slice(&e.alpha);
                p.extend_from_slice(&e.gamma);
                (
                    ItemModel::Nominal {
                        factors: f,
                        outcomes,
                        ta: e.ta.clone(),
                        tc: e.tc.clone(),
                    },
                    p,
                )
            }
            other => return Err(IfaError::InvalidSpec(format!("item {}: unknown kind `{other}`", e.name))),
        };
        let mut item = ItemSpec::new(e.name.clone(), model, params);
        let lookup = |short: &str, item: &ItemSpec| {
            item.param_index(short)
                .ok_or_else(|| IfaError::InvalidSpec(format!("item {}: no parameter `{short}`", item.name)))
        };
        for short in &e.fixed {
            let i = lookup(short, &item)?;
            item.free[i] = false;
        }
        for (short, label) in &e.labels {
            let i = lookup(short, &item)?;
            item.labels[i] = Some(label.clone());
        }
        for (short, prior) in &e.priors {
            let i = lookup(short, &item)?;
            item.priors[i] = Some(*prior);
        }
        item.validate()?;
        Ok(item)
    }
}

impl From<ItemSpec> for ItemEntry {
    fn from(item: ItemSpec) -> Self {
        let names = item.model.param_names();
        let f = item.model.factors();
        let mut e = ItemEntry {
            name: item.name.clone(),
            kind: String::new(),
            outcomes: None,
            slopes: item.params[..f].to_vec(),
            intercepts: vec![],
            g: None,
            alpha: vec![],
            gamma: vec![],
            ta: vec![],
            tc: vec![],
            fixed: names
                .iter()
                .zip(item.free.iter().zip(&item.params))
                .filter(|(_, (free, p))| !**free && p.is_finite())
                .map(|(n, _)| n.clone())
                .collect(),
            labels: names.iter().zip(&item.labels).filter_map(|(n, l)| l.clone().map(|l| (n.clone(), l))).collect(),
            priors: names.iter().zip(&item.priors).filter_map(|(n, p)| p.map(|p| (n.clone(), p))).collect(),
        };
        match &item.model {
            ItemModel::Dichotomous { .. } => {
                e.kind = "dichotomous".into();
                e.intercepts = vec![item.params[f]];
                e.g = Some(item.params[f + 1]);
            }
            ItemModel::Graded { outcomes, .. } => {
                e.kind = "graded".into();
                e.outcomes = Some(*outcomes);
                e.intercepts = item.params[f..].to_vec();
            }
            ItemModel::Nominal { outcomes, ta, tc, .. } => {
                let k1 = outcomes - 1;
                e.kind = "nominal".into();
                e.outcomes = Some(*outcomes);
                e.alpha = item.params[f..f + k1].to_vec();
                e.gamma = item.params[f + k1..].to_vec();
                e.ta = ta.clone();
                e.tc = tc.clone();
            }
        }
        e
    }
}

/// Latent distribution with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDist {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    #[serde(default)]
    pub free_mean: Vec<bool>,
    #[serde(default)]
    pub free_var: Vec<bool>,
}

impl LatentDist {
    pub fn standard(dims: usize) -> Self {
        Self {
            mean: vec![0.0; dims],
            var: vec![1.0; dims],
            free_mean: vec![false; dims],
            free_var: vec![false; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn is_free_mean(&self, d: usize) -> bool {
        self.free_mean.get(d).copied().unwrap_or(false)
    }

    pub fn is_free_var(&self, d: usize) -> bool {
        self.free_var.get(d).copied().unwrap_or(false)
    }

    pub fn validate(&self) -> Result<(), IfaError> {
        let f = self.dims();
        if self.var.len() != f || self.free_mean.len() > f || self.free_var.len() > f {
            return Err(IfaError::InvalidSpec("latent mean/var lengths differ".into()));
        }
        if self.var.iter().any(|v| !(*v > 0.0)) {
            return Err(IfaError::InvalidSpec("latent variances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub sample_size: usize,
    pub latent: LatentDist,
    pub items: Vec<ItemSpec>,
}

impl GroupSpec {
    pub fn dims(&self) -> usize {
        self.latent.dims()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    pub groups: Vec<GroupSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), IfaError> {
        if self.groups.is_empty() {
            return Err(IfaError::InvalidSpec("model has no groups".into()));
        }
        let mut labelled: BTreeMap<&str, (f64, String)> = BTreeMap::new();
        for g in &self.groups {
            g.latent.validate()?;
            if g.items.is_empty() {
                return Err(IfaError::InvalidSpec(format!("group {} has no items", g.name)));
            }
            for item in &g.items {
                item.validate()?;
                if item.model.factors() != g.dims() {
                    return Err(IfaError::InvalidSpec(format!(
                        "item {} loads {} factors but group {} has {}",
                        item.name,
                        item.model.factors(),
                        g.name,
                        g.dims()
                    )));
                }
                let names = item.model.param_names();
                for (i, label) in item.labels.iter().enumerate() {
                    let Some(label) = label else { continue };
                    if !item.free[i] {
                        return Err(IfaError::InvalidSpec(format!("label {label} on a fixed parameter")));
                    }
                    // Same parameter family (slope, intercept, ...) on both ends of an equality.
                    let family: String = names[i].trim_end_matches(|c: char| c.is_ascii_digit()).into();
                    match labelled.get(label.as_str()) {
                        Some((v, fam)) if v.to_bits() != item.params[i].to_bits() || *fam != family => {
                            return Err(IfaError::InvalidSpec(format!("parameters labelled {label} differ in value or kind")))
                        }
                        Some(_) => {}
                        None => {
                            labelled.insert(label, (item.params[i], family));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of free parameters after equality flattening.
    pub fn free_param_count(&self) -> usize {
        let mut labels = BTreeSet::new();
        let mut count = 0;
        for g in &self.groups {
            for item in &g.items {
                for (i, free) in item.free.iter().enumerate() {
                    if !free {
                        continue;
                    }
                    match &item.labels[i] {
                        Some(l) => {
                            if labels.insert(l.clone()) {
                                count += 1;
                            }
                        }
                        None => count += 1,
                    }
                }
            }
            count += (0..g.dims()).filter(|&d| g.latent.is_free_mean(d)).count();
            count += (0..g.dims()).filter(|&d| g.latent.is_free_var(d)).count();
        }
        count
    }
}

/// A builtin simulation model: generating values, starting values and the
/// log condition-number threshold used to screen unidentified trials.
#[derive(Debug, Clone)]
pub struct BuiltinSpec {
    pub name: String,
    pub generating: ModelSpec,
    pub starting: ModelSpec,
    pub screening_threshold: f64,
}

pub const BUILTIN_NAMES: [&str; 4] = ["m2pl5", "m3pl15", "grm20", "cyh1"];

pub fn builtin_spec(name: &str) -> Result<BuiltinSpec, IfaError> {
    let spec = match name {
        "m2pl5" => m2pl5(),
        "m3pl15" => m3pl15(),
        "grm20" => grm20(),
        "cyh1" => cyh1(),
        other => return Err(IfaError::UnknownSpec(other.into())),
    };
    spec.generating.validate()?;
    spec.starting.validate()?;
    Ok(spec)
}

const M2PL5_SLOPES: [f64; 5] = [0.5, 1.4, 2.2, 3.1, 4.0];
const BASE_INTERCEPTS: [f64; 5] = [-1.5, -0.75, 0.0, 0.75, 1.5];

fn single_group(name: &str, n: usize, items: Vec<ItemSpec>) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        groups: vec![GroupSpec {
            name: "g1".into(),
            sample_size: n,
            latent: LatentDist::standard(1),
            items,
        }],
    }
}

fn m2pl5() -> BuiltinSpec {
    let items = |start: bool| -> Vec<ItemSpec> {
        (0..5)
            .map(|i| {
                let a = M2PL5_SLOPES[i];
                if start {
                    ItemSpec::dichotomous(format!("i{}", i + 1), &[1.0], 0.0, f64::NEG_INFINITY)
                } else {
                    ItemSpec::dichotomous(format!("i{}", i + 1), &[a], a * BASE_INTERCEPTS[i], f64::NEG_INFINITY)
                }
            })
            .collect()
    };
    BuiltinSpec {
        name: "m2pl5".into(),
        generating: single_group("m2pl5", 1000, items(false)),
        starting: single_group("m2pl5", 1000, items(true)),
        screening_threshold: 16.1,
    }
}

fn m3pl15() -> BuiltinSpec {
    let items = |start: bool| -> Vec<ItemSpec> {
        (0..15)
            .map(|i| {
                let grp = i / 5 + 1;
                let g = logit(1.0 / (1.0 + grp as f64));
                let (a, c) = if start { (1.0, 0.0) } else { (2.0, 2.0 * BASE_INTERCEPTS[i % 5]) };
                let mut item = ItemSpec::dichotomous(format!("i{}", i + 1), &[a], c, g);
                item.labels[0] = Some("slope".into());
                item.priors[2] = Some(GaussianPrior { mean: g, sd: 0.5 });
                item
            })
            .collect()
    };
    BuiltinSpec {
        name: "m3pl15".into(),
        generating: single_group("m3pl15", 250, items(false)),
        starting: single_group("m3pl15", 250, items(true)),
        screening_threshold: 8.5,
    }
}

fn grm20() -> BuiltinSpec {
    let items = |start: bool| -> Vec<ItemSpec> {
        (0..20)
            .map(|i| {
                let a = 0.5 + 3.5 * i as f64 / 19.0;
                let b1 = BASE_INTERCEPTS[i % 5];
                let b2 = b1 - 0.1;
                if start {
                    ItemSpec::graded(format!("i{}", i + 1), &[1.0], &[0.5, -0.5])
                } else {
                    ItemSpec::graded(format!("i{}", i + 1), &[a], &[a * b1, a * b2])
                }
            })
            .collect()
    };
    BuiltinSpec {
        name: "grm20".into(),
        generating: single_group("grm20", 2000, items(false)),
        starting: single_group("grm20", 2000, items(true)),
        screening_threshold: 16.1,
    }
}

/// (general slope, specific slope, intercept) for the 16 bifactor items.
const CYH1_ITEMS: [(f64, f64, f64); 16] = [
    (1.00, 0.80, 1.00),
    (1.40, 1.50, 0.25),
    (1.70, 1.20, -0.25),
    (2.00, 1.00, -1.00),
    (1.40, 1.00, 1.00),
    (1.70, 0.80, 0.25),
    (2.00, 1.50, -0.25),
    (1.00, 1.20, -1.00),
    (1.70, 1.20, 1.00),
    (2.00, 1.00, 0.25),
    (1.00, 0.80, -0.25),
    (1.40, 1.50, -1.00),
    (2.00, 1.50, 1.00),
    (1.00, 1.20, 0.25),
    (1.40, 1.00, -0.25),
    (1.70, 0.80, -1.00),
];

fn cyh1() -> BuiltinSpec {
    let item = |i: usize, start: bool| -> ItemSpec {
        let (gen, spec, c) = CYH1_ITEMS[i];
        let specific = 1 + i / 4;
        let mut slopes = [0.0; 5];
        slopes[0] = if start { 1.0 } else { gen };
        slopes[specific] = if start { 1.0 } else { spec };
        let mut it = ItemSpec::dichotomous(format!("i{}", i + 1), &slopes, if start { 0.0 } else { c }, f64::NEG_INFINITY);
        for d in 0..5 {
            it.free[d] = d == 0 || d == specific;
        }
        it.labels[0] = Some(format!("i{}.a1", i + 1));
        it.labels[specific] = Some(format!("i{}.a{}", i + 1, specific + 1));
        it.labels[5] = Some(format!("i{}.c", i + 1));
        it
    };
    let model = |start: bool| -> ModelSpec {
        let mut latent2 = LatentDist::standard(5);
        if !start {
            latent2.mean[..4].copy_from_slice(&[1.0, -0.5, 0.0, 0.5]);
            latent2.var[..4].copy_from_slice(&[0.8, 1.2, 1.5, 1.0]);
        }
        latent2.free_mean = vec![true, true, true, true, false];
        latent2.free_var = vec![true, true, true, true, false];
        ModelSpec {
            name: "cyh1".into(),
            groups: vec![
                GroupSpec {
                    name: "g1".into(),
                    sample_size: 1000,
                    latent: LatentDist::standard(5),
                    items: (0..16).map(|i| item(i, start)).collect(),
                },
                GroupSpec {
                    name: "g2".into(),
                    sample_size: 1000,
                    latent: latent2,
                    items: (0..12).map(|i| item(i, start)).collect(),
                },
            ],
        }
    };
    BuiltinSpec {
        name: "cyh1".into(),
        generating: model(false),
        starting: model(true),
        screening_threshold: 8.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_parameter_counts_match_model_table() {
        let expect = [("m2pl5", 10), ("m3pl15", 31), ("grm20", 60), ("cyh1", 56)];
        for (name, p) in expect {
            let b = builtin_spec(name).unwrap();
            assert_eq!(b.generating.free_param_count(), p, "{name}");
            assert_eq!(b.starting.free_param_count(), p, "{name}");
        }
    }

    #[test]
    fn m2pl5_intercepts_are_slope_scaled() {
        let b = builtin_spec("m2pl5").unwrap();
        let items = &b.generating.groups[0].items;
        assert_eq!(items[2].params[1], 0.0);
        assert_eq!(items[0].params[1], 0.5 * -1.5);
        assert_eq!(items[4].params[..2], [4.0, 6.0]);
        assert!(items.iter().all(|it| !it.free[2]));
        let start = &b.starting.groups[0].items;
        assert!(start.iter().all(|it| it.params[0] == 1.0 && it.params[1] == 0.0));
    }

    #[test]
    fn m3pl15_lower_bounds_and_priors() {
        let b = builtin_spec("m3pl15").unwrap();
        let items = &b.generating.groups[0].items;
        assert!((items[5].params[2] - (-std::f64::consts::LN_2)).abs() < 1e-15);
        assert_eq!(items[0].params[2], 0.0);
        assert!((items[10].params[2] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert_eq!(items[7].priors[2].unwrap().sd, 0.5);
        assert_eq!(b.starting.groups[0].items[7].params[2], items[7].params[2]);
        assert_eq!(b.generating.groups[0].sample_size, 250);
    }

    #[test]
    fn grm20_intercepts() {
        let b = builtin_spec("grm20").unwrap();
        let items = &b.generating.groups[0].items;
        assert_eq!(items[0].params[0], 0.5);
        assert_eq!(items[19].params[0], 4.0);
        for it in items {
            let a = it.params[0];
            assert!((it.params[1] - it.params[2] - 0.1 * a).abs() < 1e-12);
        }
        assert_eq!(b.starting.groups[0].items[3].params, vec![1.0, 0.5, -0.5]);
    }

    #[test]
    fn cyh1_table_rows() {
        let b = builtin_spec("cyh1").unwrap();
        let g1 = &b.generating.groups[0];
        assert_eq!(g1.items[0].params[..6], [1.0, 0.8, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(g1.items[12].params[4], 1.5);
        assert_eq!(b.generating.groups[1].items.len(), 12);
        assert_eq!(b.generating.groups[1].latent.mean[..4], [1.0, -0.5, 0.0, 0.5]);
        assert_eq!(b.generating.groups[1].latent.var[..4], [0.8, 1.2, 1.5, 1.0]);
    }

    #[test]
    fn unknown_builtin() {
        assert!(matches!(builtin_spec("m9"), Err(IfaError::UnknownSpec(_))));
    }

    #[test]
    fn toml_round_trip() {
        let b = builtin_spec("m3pl15").unwrap();
        let text = toml::to_string(&b.generating).unwrap();
        let back: ModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, b.generating);
        let b = builtin_spec("grm20").unwrap();
        let back: ModelSpec = toml::from_str(&toml::to_string(&b.generating).unwrap()).unwrap();
        assert_eq!(back, b.generating);
    }

    #[test]
    fn toml_item_parsing() {
        let text = r#"
name = "tiny"
[[groups]]
name = "g1"
sample_size = 10
latent = { mean = [0.0], var = [1.0] }
[[groups.items]]
name = "q1"
kind = "dichotomous"
slopes = [1.2]
intercepts = [0.3]
g = -1.0
fixed = ["g"]
priors = { c = { mean = 0.0, sd = 2.0 } }
[[groups.items]]
name = "q2"
kind = "graded"
slopes = [1.0]
intercepts = [1.0, 0.0, -1.0]
labels = { a1 = "common" }
"#;
        let spec: ModelSpec = toml::from_str(text).unwrap();
        spec.validate().unwrap();
        let q1 = &spec.groups[0].items[0];
        assert_eq!(q1.free, vec![true, true, false]);
        assert_eq!(q1.priors[1].unwrap().sd, 2.0);
        let q2 = &spec.groups[0].items[1];
        assert_eq!(q2.model, ItemModel::Graded { factors: 1, outcomes: 4 });
        assert_eq!(q2.labels[0].as_deref(), Some("common"));
        assert_eq!(spec.free_param_count(), 2 + 4);

        let bad = text.replace("[1.0, 0.0, -1.0]", "[0.0, 1.0, -1.0]");
        assert!(toml::from_str::<ModelSpec>(&bad).is_err());
    }
}
