//! Monte Carlo studies: simulate, fit, screen, estimate, score and summarize.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::estimators::{estimate_covariance, CovEstimate, Estimator, EstimatorConfig};
use crate::em::{EmConfig, EmError};
use crate::ifa::{builtin_spec, sample_responses, BuiltinSpec, FitConfig, IfaError, IfaModel};
use crate::metrics;
use crate::numdiff::RichardsonConfig;
use crate::sem::SemConfig;

/// Reference covariance the estimators are scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthMode {
    /// Richardson estimate of the same trial.
    #[default]
    Richardson,
    /// Sample covariance of the estimates across identified trials.
    MonteCarlo,
}

fn default_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    /// Builtin model name.
    pub model: String,
    pub replications: usize,
    #[serde(default)]
    pub seed_base: u64,
    /// Respondents per group; the builtin sample size when absent.
    #[serde(default)]
    pub sample_size: Option<usize>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub truth: TruthMode,
    /// Log condition-number threshold; the builtin model's when absent.
    #[serde(default)]
    pub screening: Option<f64>,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub sem: SemConfig,
    #[serde(default)]
    pub richardson: RichardsonConfig,
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] IfaError),
    #[error(transparent)]
    Em(#[from] EmError),
}

impl StudySpec {
    pub fn new(model: &str, replications: usize) -> Self {
        Self {
            model: model.into(),
            replications,
            seed_base: 0,
            sample_size: None,
            estimators: default_estimators(),
            truth: TruthMode::default(),
            screening: None,
            em: EmConfig::default(),
            fit: FitConfig::default(),
            sem: SemConfig::default(),
            richardson: RichardsonConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        if self.replications == 0 {
            return Err(StudyError::Invalid("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(StudyError::Invalid("no estimators selected".into()));
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return Err(StudyError::Invalid("estimator listed twice".into()));
        }
        if self.sample_size == Some(0) {
            return Err(StudyError::Invalid("sample size must be positive".into()));
        }
        self.em.validate()?;
        self.sem.validate().map_err(|e| StudyError::Invalid(e.to_string()))?;
        builtin_spec(&self.model)?;
        Ok(())
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            sem: self.sem,
            richardson: self.richardson,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            mstep_rel_tolerance: self.em.mstep_rel_tolerance,
            ..self.fit
        }
    }

    /// Builtin model with the sample-size override applied.
    pub fn builtin(&self) -> Result<BuiltinSpec, StudyError> {
        let mut b = builtin_spec(&self.model)?;
        if let Some(n) = self.sample_size {
            for g in b.generating.groups.iter_mut().chain(b.starting.groups.iter_mut()) {
                g.sample_size = n;
            }
        }
        Ok(b)
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed_base.wrapping_add(trial as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub converged: bool,
    pub iterations: usize,
    pub seconds: f64,
    pub log_likelihood: f64,
    pub condition_log: Option<f64>,
    /// Converged within the iteration limit and passed the condition screen.
    pub identified: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutcome {
    pub estimator: Estimator,
    pub converged: bool,
    pub seconds: f64,
    pub evaluations: usize,
    pub failure: Option<String>,
    pub v: Option<DMatrix<f64>>,
    pub mre: Option<f64>,
    pub log_kl: Option<f64>,
    pub rd: Option<f64>,
}

impl EstimatorOutcome {
    fn from_estimate(est: CovEstimate) -> Self {
        Self {
            estimator: est.estimator,
            converged: est.failure.is_none(),
            seconds: est.seconds,
            evaluations: est.evaluations,
            failure: est.failure,
            v: est.v,
            mre: est.mre,
            log_kl: None,
            rd: None,
        }
    }

    fn skipped(estimator: Estimator, reason: &str) -> Self {
        Self {
            estimator,
            converged: false,
            seconds: 0.0,
            evaluations: 0,
            failure: Some(reason.into()),
            v: None,
            mre: None,
            log_kl: None,
            rd: None,
        }
    }

    fn score(&mut self, truth: &DMatrix<f64>) {
        let Some(v) = self.v.as_ref().filter(|_| self.converged) else {
            return;
        };
        self.log_kl = metrics::kl_divergence(truth, v).ok().map(f64::ln);
        self.rd = metrics::rd_norm(&metrics::standard_errors(v), &metrics::standard_errors(truth)).ok();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub fit: FitSummary,
    pub theta_hat: Vec<f64>,
    pub estimates: Vec<EstimatorOutcome>,
}

impl TrialResult {
    /// Copy with wall-clock fields zeroed; everything else is a pure function of the study.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.fit.seconds = 0.0;
        for e in &mut out.estimates {
            e.seconds = 0.0;
        }
        out
    }

    pub fn outcome(&self, estimator: Estimator) -> Option<&EstimatorOutcome> {
        self.estimates.iter().find(|e| e.estimator == estimator)
    }
}

/// Simulates, fits and screens one trial, then runs every estimator.
///
/// With Richardson truth, the reference is the trial's Richardson estimate
/// (computed even when not listed); it is not scored against itself.
pub fn run_trial(study: &StudySpec, trial: usize) -> Result<TrialResult, StudyError> {
    let builtin = study.builtin()?;
    let seed = study.trial_seed(trial);
    let data = sample_responses(&builtin.generating.groups, seed)?;
    let model = IfaModel::new(builtin.starting.clone(), data, study.fit_config())?;
    let threshold = study.screening.unwrap_or(builtin.screening_threshold);

    let start = Instant::now();
    let run = model.fit(&study.em);
    let fit_seconds = start.elapsed().as_secs_f64();
    let run = match run {
        Ok(run) => run,
        Err(e) => {
            let reason = match e {
                EmError::IterationLimit { .. } => "unidentified: iteration limit",
                _ => "fit failed",
            };
            return Ok(TrialResult {
                trial,
                seed,
                fit: FitSummary {
                    converged: false,
                    iterations: study.em.max_iterations,
                    seconds: fit_seconds,
                    log_likelihood: f64::NAN,
                    condition_log: None,
                    identified: false,
                    failure: Some(e.to_string()),
                },
                theta_hat: vec![],
                estimates: study.estimators.iter().map(|&e| EstimatorOutcome::skipped(e, reason)).collect(),
            });
        }
    };
    let theta_hat = run.theta_hat.values().to_vec();
    let condition_log = model.gradient_crossproduct(&theta_hat).ok().and_then(|g| metrics::condition_log(&g).ok());
    let identified = condition_log.is_some_and(|c| c <= threshold);
    let fit = FitSummary {
        converged: true,
        iterations: run.iterations,
        seconds: fit_seconds,
        log_likelihood: run.final_ll(),
        condition_log,
        identified,
        failure: None,
    };
    if !identified {
        return Ok(TrialResult {
            trial,
            seed,
            fit,
            theta_hat,
            estimates: study
                .estimators
                .iter()
                .map(|&e| EstimatorOutcome::skipped(e, "unidentified: condition number"))
                .collect(),
        });
    }

    let cfg = study.estimator_config();
    let mut estimates: Vec<EstimatorOutcome> = study
        .estimators
        .iter()
        .map(|&e| EstimatorOutcome::from_estimate(estimate_covariance(&model, &run, e, &cfg)))
        .collect();
    if study.truth == TruthMode::Richardson {
        let truth = match estimates.iter().find(|e| e.estimator == Estimator::Richardson) {
            Some(re) => re.v.clone(),
            None => estimate_covariance(&model, &run, Estimator::Richardson, &cfg).v,
        };
        if let Some(truth) = truth {
            for e in estimates.iter_mut().filter(|e| e.estimator != Estimator::Richardson) {
                e.score(&truth);
            }
        }
    }
    Ok(TrialResult {
        trial,
        seed,
        fit,
        theta_hat,
        estimates,
    })
}

/// Runs every trial in parallel. Results are ordered by trial id.
pub fn run_study(study: &StudySpec) -> Result<Vec<TrialResult>, StudyError> {
    study.validate()?;
    let mut results = (0..study.replications)
        .into_par_iter()
        .map(|t| run_trial(study, t))
        .collect::<Result<Vec<_>, _>>()?;
    if study.truth == TruthMode::MonteCarlo {
        apply_monte_carlo_truth(study, &mut results)?;
    }
    Ok(results)
}

/// Scores every converged estimate against the sample covariance of the
/// identified trials' estimates. Returns the ground truth when it exists.
pub fn apply_monte_carlo_truth(study: &StudySpec, results: &mut [TrialResult]) -> Result<Option<metrics::GroundTruth>, StudyError> {
    let builtin = study.builtin()?;
    // Any data set gives the parameter layout.
    let data = sample_responses(&builtin.generating.groups, study.seed_base)?;
    let layout_model = IfaModel::new(builtin.starting.clone(), data, study.fit_config())?;
    let generating = layout_model.vector_from_spec(&builtin.generating)?;
    let mles: Vec<Vec<f64>> = results.iter().filter(|r| r.fit.identified).map(|r| r.theta_hat.clone()).collect();
    let Ok(truth) = metrics::mc_ground_truth(&mles, &generating) else {
        return Ok(None);
    };
    for r in results.iter_mut() {
        for e in &mut r.estimates {
            e.score(&truth.v);
        }
    }
    Ok(Some(truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub trials: usize,
    pub failures: usize,
    pub failure_pct: f64,
    /// Means over converged trials; NaN when none qualify.
    pub mean_seconds: f64,
    pub mean_evaluations: f64,
    pub mean_log_kl: f64,
    pub mean_rd: f64,
    pub mean_mre: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Per-estimator failure rates and accuracy means, in the study's estimator order.
pub fn summarize_study(results: &[TrialResult]) -> Vec<SummaryRow> {
    let Some(first) = results.first() else {
        return vec![];
    };
    first
        .estimates
        .iter()
        .map(|e| e.estimator)
        .map(|estimator| {
            let outcomes: Vec<&EstimatorOutcome> = results.iter().filter_map(|r| r.outcome(estimator)).collect();
            let ok: Vec<&&EstimatorOutcome> = outcomes.iter().filter(|o| o.converged).collect();
            let failures = outcomes.len() - ok.len();
            SummaryRow {
                estimator,
                trials: outcomes.len(),
                failures,
                failure_pct: 100.0 * failures as f64 / outcomes.len().max(1) as f64,
                mean_seconds: mean(ok.iter().map(|o| o.seconds)),
                mean_evaluations: mean(ok.iter().map(|o| o.evaluations as f64)),
                mean_log_kl: mean(ok.iter().filter_map(|o| o.log_kl)),
                mean_rd: mean(ok.iter().filter_map(|o| o.rd)),
                mean_mre: mean(ok.iter().filter_map(|o| o.mre)),
            }
        })
        .collect()
}

/// Columns: estimator, trials, failures, failure_pct.
pub fn write_failure_table<W: Write>(rows: &[SummaryRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimator", "trials", "failures", "failure_pct"])?;
    for r in rows {
        w.write_record([
            r.estimator.to_string(),
            r.trials.to_string(),
            r.failures.to_string(),
            format!("{:.1}", r.failure_pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: estimator, mean_seconds, mean_evaluations, mean_log_kl, mean_rd, mean_mre.
pub fn write_accuracy_table<W: Write>(rows: &[SummaryRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimator", "mean_seconds", "mean_evaluations", "mean_log_kl", "mean_rd", "mean_mre"])?;
    for r in rows {
        w.write_record([
            r.estimator.to_string(),
            format!("{:.4}", r.mean_seconds),
            format!("{:.1}", r.mean_evaluations),
            format!("{:.4}", r.mean_log_kl),
            format!("{:.4}", r.mean_rd),
            format!("{:.4}", r.mean_mre),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per trial and estimator.
pub fn write_trial_table<W: Write>(results: &[TrialResult], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "trial",
        "seed",
        "identified",
        "condition_log",
        "estimator",
        "converged",
        "seconds",
        "evaluations",
        "log_kl",
        "rd",
        "mre",
        "failure",
    ])?;
    for r in results {
        for e in &r.estimates {
            w.write_record([
                r.trial.to_string(),
                r.seed.to_string(),
                r.fit.identified.to_string(),
                cell(r.fit.condition_log),
                e.estimator.to_string(),
                e.converged.to_string(),
                e.seconds.to_string(),
                e.evaluations.to_string(),
                cell(e.log_kl),
                cell(e.rd),
                cell(e.mre),
                e.failure.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
