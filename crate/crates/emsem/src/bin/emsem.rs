//! Command-line front end: fit models, estimate standard errors, simulate
//! data, run studies and emit noise-curve and target-sweep data.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use emsem::em::{run_em, EmConfig, EmModel, EmRun, ParamVector};
use emsem::harness::estimators::{estimate_covariance, invert_information, richardson_information, Estimator, EstimatorConfig};
use emsem::harness::fixtures::LinkageModel;
use emsem::harness::io;
use emsem::harness::study::{self, StudySpec};
use emsem::ifa::{builtin_spec, sample_responses, FitConfig, IfaModel, ModelSpec, ResponseData};
use emsem::metrics;
use emsem::numdiff::RichardsonConfig;
use emsem::sem::{fit_noise_model, noise_curve, target_sweep, SemConfig};

#[derive(Parser)]
#[command(name = "emsem", version, about = "Supplemented-EM standard errors for item factor models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Relative log-likelihood tolerance for EM convergence.
    #[arg(long, global = true, default_value_t = 1e-11)]
    rel_tol: f64,
    /// Relative tolerance of each M-step Newton solve.
    #[arg(long, global = true, default_value_t = 1e-12)]
    mstep_tol: f64,
    #[arg(long, global = true, default_value_t = 750)]
    max_iter: usize,
    /// Column stability threshold for MR and Tian.
    #[arg(long, global = true, default_value_t = 1e-3)]
    sem_tol: f64,
    /// Seed for simulated data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Quadrature points per dimension.
    #[arg(long, global = true)]
    quad_points: Option<usize>,
    /// Quadrature range, symmetric about zero.
    #[arg(long, global = true)]
    quad_range: Option<f64>,
    /// Largest admissible number of quadrature nodes.
    #[arg(long, global = true)]
    grid_budget: Option<usize>,
    /// Directory for output files; results go to stdout only when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model by EM and report the estimates.
    Fit(ModelArgs),
    /// Standard errors by one covariance estimator.
    Se {
        #[arg(long)]
        method: Estimator,
        /// Use an analytic fixture instead of an item model.
        #[arg(long, value_parser = ["linkage"])]
        fixture: Option<String>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Simulate response data from a model's values.
    Simulate(ModelArgs),
    /// Run a Monte Carlo study described by a TOML file.
    Study {
        file: PathBuf,
        /// Override the number of replications.
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Finite-difference noise ν(u) per parameter and its β/u² fit.
    NoiseCurve {
        #[command(flatten)]
        model: ModelArgs,
        /// Parameter indices; all parameters when empty.
        #[arg(long, value_delimiter = ',')]
        params: Vec<usize>,
        #[arg(long, default_value_t = 1e-3)]
        u_min: f64,
        #[arg(long, default_value_t = 5e-3)]
        u_max: f64,
        #[arg(long, default_value_t = 10)]
        points: usize,
        /// Spacing between the two probes of each pair.
        #[arg(long, default_value_t = 1e-5)]
        w: f64,
    },
    /// Agile error against Richardson across noise targets.
    TargetSweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-8,-6.5,-5.2,-4")]
        targets: Vec<f64>,
    },
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Builtin model (m2pl5, m3pl15, grm20, cyh1); fits start from its starting values.
    #[arg(long, conflicts_with = "spec")]
    model: Option<String>,
    /// Model spec in TOML; its values are the starting values.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Response data, one CSV per group. Data are simulated when omitted.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Respondents per group when simulating.
    #[arg(long)]
    n: Option<usize>,
}

enum Failure {
    Usage(String),
    Fit(String),
    Estimator(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Fit(_) => 2,
            Failure::Estimator(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Fit(m) | Failure::Estimator(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let g = &cli.global;
    if !(g.rel_tol > 0.0 && g.mstep_tol > 0.0 && g.sem_tol > 0.0) || g.max_iter == 0 {
        return Err(Failure::Usage("tolerances and the iteration limit must be positive".into()));
    }
    match &cli.command {
        Command::Fit(m) => cmd_fit(g, m),
        Command::Se { method, fixture, model } => cmd_se(g, *method, fixture.as_deref(), model),
        Command::Simulate(m) => cmd_simulate(g, m),
        Command::Study { file, replications } => cmd_study(g, file, *replications),
        Command::NoiseCurve {
            model,
            params,
            u_min,
            u_max,
            points,
            w,
        } => cmd_noise_curve(g, model, params, *u_min, *u_max, *points, *w),
        Command::TargetSweep { model, targets } => cmd_target_sweep(g, model, targets),
    }
}

impl Global {
    fn em(&self) -> EmConfig {
        EmConfig {
            rel_ll_tolerance: self.rel_tol,
            max_iterations: self.max_iter,
            mstep_rel_tolerance: self.mstep_tol,
        }
    }

    fn fit(&self) -> FitConfig {
        let mut f = FitConfig::from_em(&self.em());
        f.quad_points = self.quad_points.or(f.quad_points);
        f.quad_range = self.quad_range.or(f.quad_range);
        if let Some(b) = self.grid_budget {
            f.grid_budget = b;
        }
        f
    }

    fn estimators(&self) -> EstimatorConfig {
        EstimatorConfig {
            sem: SemConfig {
                sem_tolerance: self.sem_tol,
                skip_tolerance: self.rel_tol,
                ..SemConfig::default()
            },
            richardson: RichardsonConfig::default(),
        }
    }

    /// Writes `text` to `<out>/<name>` when an output directory is set.
    fn save(&self, name: &str, text: &str) -> Outcome {
        if let Some(dir) = &self.out {
            io::write_text(&dir.join(name), text).map_err(usage)?;
        }
        Ok(())
    }
}

fn load_model(g: &Global, args: &ModelArgs) -> Result<IfaModel, Failure> {
    let (start, generating): (ModelSpec, ModelSpec) = match (&args.model, &args.spec) {
        (Some(name), None) => {
            let b = builtin_spec(name).map_err(usage)?;
            (b.starting, b.generating)
        }
        (None, Some(path)) => {
            let s = io::load_spec(path).map_err(usage)?;
            (s.clone(), s)
        }
        _ => return Err(Failure::Usage("give exactly one of --model or --spec".into())),
    };
    let data = if args.data.is_empty() {
        simulate(&generating, args.n, g.seed)?
    } else {
        io::load_data(&start, &args.data).map_err(usage)?
    };
    IfaModel::new(start, data, g.fit()).map_err(usage)
}

fn simulate(spec: &ModelSpec, n: Option<usize>, seed: u64) -> Result<Vec<ResponseData>, Failure> {
    let mut groups = spec.groups.clone();
    if let Some(n) = n {
        for grp in &mut groups {
            grp.sample_size = n;
        }
    }
    sample_responses(&groups, seed).map_err(usage)
}

fn fit_model<M: EmModel>(model: &M, start: &ParamVector, g: &Global) -> Result<EmRun, Failure> {
    let run = run_em(model, start, &g.em()).map_err(|e| Failure::Fit(e.to_string()))?;
    run.require_converged().map_err(|e| Failure::Fit(e.to_string()))?;
    Ok(run)
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn emit(g: &Global, name: &str, text: &str) -> Outcome {
    print!("{text}");
    std::io::stdout().flush().map_err(usage)?;
    g.save(name, text)
}

#[derive(Serialize)]
struct ParamReport {
    name: String,
    estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    se: Option<f64>,
}

fn param_reports(names: &[String], theta: &[f64], se: Option<&[f64]>) -> Vec<ParamReport> {
    names
        .iter()
        .zip(theta)
        .enumerate()
        .map(|(i, (n, &t))| ParamReport {
            name: n.clone(),
            estimate: t,
            se: se.map(|s| s[i]),
        })
        .collect()
}

#[derive(Serialize)]
struct FitReport {
    converged: bool,
    iterations: usize,
    log_likelihood: f64,
    condition_log: Option<f64>,
    parameters: Vec<ParamReport>,
}

fn cmd_fit(g: &Global, args: &ModelArgs) -> Outcome {
    let model = load_model(g, args)?;
    let run = fit_model(&model, &model.start_vector(), g)?;
    let theta = run.theta_hat.values();
    let condition_log = model.gradient_crossproduct(theta).ok().and_then(|m| metrics::condition_log(&m).ok());
    let report = FitReport {
        converged: run.converged,
        iterations: run.iterations,
        log_likelihood: run.final_ll(),
        condition_log,
        parameters: param_reports(&model.layout().names, theta, None),
    };
    emit(g, "fit.json", &json(&report))?;
    if let Some(dir) = &g.out {
        io::save_toml(&model.spec_at(theta), &dir.join("fitted.toml")).map_err(usage)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SeReport {
    method: Estimator,
    parameters: Vec<ParamReport>,
    mre: Option<f64>,
    evaluations: usize,
    seconds: f64,
    failure: Option<String>,
}

fn cmd_se(g: &Global, method: Estimator, fixture: Option<&str>, args: &ModelArgs) -> Outcome {
    match fixture {
        Some(_) => {
            let m = LinkageModel::default();
            let start = ParamVector::new(vec![0.5], m.layout().clone()).map_err(usage)?;
            let run = fit_model(&m, &start, g)?;
            se_report(g, &m, &run, method)
        }
        None => {
            let model = load_model(g, args)?;
            let run = fit_model(&model, &model.start_vector(), g)?;
            se_report(g, &model, &run, method)
        }
    }
}

fn se_report<M: EmModel>(g: &Global, model: &M, run: &EmRun, method: Estimator) -> Outcome {
    let est = estimate_covariance(model, run, method, &g.estimators());
    let se = est.standard_errors();
    let names = &model.layout().names;
    let report = SeReport {
        method,
        parameters: param_reports(names, run.theta_hat.values(), se.as_deref()),
        mre: est.mre,
        evaluations: est.evaluations,
        seconds: est.seconds,
        failure: est.failure.clone(),
    };
    emit(g, "se.json", &json(&report))?;
    if let Some(dir) = &g.out {
        if let Some(v) = &est.v {
            io::save_matrix(v, names, &dir.join("covariance.csv")).map_err(usage)?;
        }
        if let Some(info) = &est.info {
            io::save_matrix(info, names, &dir.join("information.csv")).map_err(usage)?;
        }
    }
    match est.failure {
        Some(reason) => Err(Failure::Estimator(reason)),
        None => Ok(()),
    }
}

fn cmd_simulate(g: &Global, args: &ModelArgs) -> Outcome {
    let spec = match (&args.model, &args.spec) {
        (Some(name), None) => builtin_spec(name).map_err(usage)?.generating,
        (None, Some(path)) => io::load_spec(path).map_err(usage)?,
        _ => return Err(Failure::Usage("give exactly one of --model or --spec".into())),
    };
    let data = simulate(&spec, args.n, g.seed)?;
    match &g.out {
        Some(dir) => {
            for p in io::save_data(&spec, &data, dir).map_err(usage)? {
                println!("{}", p.display());
            }
        }
        None if data.len() == 1 => data[0].write_csv(std::io::stdout()).map_err(usage)?,
        None => return Err(Failure::Usage("multi-group data needs --out".into())),
    }
    Ok(())
}

fn csv_text(write: impl FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>) -> Result<String, Failure> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(usage)?;
    String::from_utf8(buf).map_err(usage)
}

fn cmd_study(g: &Global, file: &Path, replications: Option<usize>) -> Outcome {
    let mut spec: StudySpec = io::load_toml(file).map_err(usage)?;
    if let Some(r) = replications {
        spec.replications = r;
    }
    spec.validate().map_err(usage)?;
    let results = study::run_study(&spec).map_err(usage)?;
    let rows = study::summarize_study(&results);
    let failures = csv_text(|b| study::write_failure_table(&rows, b))?;
    let accuracy = csv_text(|b| study::write_accuracy_table(&rows, b))?;
    let trials = csv_text(|b| study::write_trial_table(&results, b))?;
    print!("{failures}\n{accuracy}");
    g.save("failures.csv", &failures)?;
    g.save("accuracy.csv", &accuracy)?;
    g.save("trials.csv", &trials)
}

fn cmd_noise_curve(g: &Global, args: &ModelArgs, params: &[usize], u_min: f64, u_max: f64, points: usize, w: f64) -> Outcome {
    if !(0.0 < u_min && u_min < u_max) || points < 3 || !(w > 0.0) {
        return Err(Failure::Usage("need 0 < u-min < u-max, at least 3 points and w > 0".into()));
    }
    let model = load_model(g, args)?;
    let run = fit_model(&model, &model.start_vector(), g)?;
    let theta = run.theta_hat.values();
    let names = &model.layout().names;
    let params: Vec<usize> = if params.is_empty() { (0..names.len()).collect() } else { params.to_vec() };
    if let Some(bad) = params.iter().find(|&&j| j >= names.len()) {
        return Err(Failure::Usage(format!("parameter index {bad} out of range")));
    }
    let grid: Vec<f64> = (0..points).map(|k| u_min + (u_max - u_min) * k as f64 / (points - 1) as f64).collect();
    let mut curve = String::from("param,name,u,nu\n");
    let mut fits = String::from("param,name,beta,r2,log_one_minus_r2\n");
    for &j in &params {
        let pts = noise_curve(&model, theta, j, &grid, w, g.sem_tol).map_err(|e| Failure::Estimator(e.to_string()))?;
        let mut usable = Vec::new();
        for p in &pts {
            let nu = p.nu.map(|v| v.to_string()).unwrap_or_default();
            curve += &format!("{j},{},{},{nu}\n", names[j], p.u);
            if let Some(v) = p.nu {
                usable.push((p.u, v));
            }
        }
        match fit_noise_model(&usable) {
            Ok(f) => fits += &format!("{j},{},{},{},{}\n", names[j], f.beta, f.r2, (1.0 - f.r2).ln()),
            Err(_) => fits += &format!("{j},{},,,\n", names[j]),
        }
    }
    print!("{fits}");
    g.save("noise_curve.csv", &curve)?;
    g.save("noise_fit.csv", &fits)
}

fn cmd_target_sweep(g: &Global, args: &ModelArgs, targets: &[f64]) -> Outcome {
    let model = load_model(g, args)?;
    let run = fit_model(&model, &model.start_vector(), g)?;
    let theta = run.theta_hat.values();
    let cfg = g.estimators();
    let (info, _) = richardson_information(&model, theta, &cfg.richardson).map_err(Failure::Estimator)?;
    let truth: DMatrix<f64> = invert_information(&info).map_err(Failure::Estimator)?;
    let ic = model.complete_info(theta).map_err(|e| Failure::Estimator(e.to_string()))?;
    let sweep = target_sweep(&model, theta, &ic, targets, &truth, &cfg.sem).map_err(|e| Failure::Estimator(e.to_string()))?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut text = String::from("ln_target,log_kl,rd,mre,failure\n");
    for p in &sweep {
        text += &format!(
            "{},{},{},{},{}\n",
            p.ln_target,
            cell(p.log_kl),
            cell(p.rd),
            cell(p.mre),
            p.failure.clone().unwrap_or_default()
        );
    }
    emit(g, "target_sweep.csv", &text)
}
