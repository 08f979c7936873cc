//! Item factor analysis: response models, model specifications, response
//! data, quadrature and the Bock–Aitkin EM fit.

pub mod data;
pub mod fit;
pub mod quadrature;
pub mod response;
pub mod spec;

use thiserror::Error;

pub use data::{sample_responses, ResponseData};
pub use fit::{FitConfig, IfaModel};
pub use quadrature::{build_quadrature, Quadrature};
pub use response::{item_deriv, logistic, logistic_clamped, logit, prob_dichotomous, prob_graded, prob_nominal, ItemModel};
pub use spec::{builtin_spec, BuiltinSpec, GaussianPrior, GroupSpec, ItemSpec, LatentDist, ModelSpec};

#[derive(Debug, Error)]
pub enum IfaError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("unknown builtin model `{0}`")]
    UnknownSpec(String),
    #[error("graded intercepts out of order (category {category} has negative probability)")]
    OrderingViolation { category: usize },
    #[error("quadrature grid of {nodes} nodes exceeds the budget of {budget}")]
    GridBudgetExceeded { nodes: f64, budget: usize },
    #[error("invalid quadrature: {0}")]
    InvalidQuadrature(String),
    #[error("response pattern {pattern} has zero likelihood at every quadrature node")]
    NonFinitePattern { pattern: usize },
    #[error("M-step diverged for block {block}")]
    MStepDivergence { block: usize },
    #[error("invalid response data: {0}")]
    InvalidData(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },
}
