use std::path::Path;
use std::process::{Command, Output};

use emsem::harness::fixtures::LinkageModel;
use emsem::harness::io;
use serde_json::Value;

fn emsem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emsem")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(emsem(&["--help"]).status.code(), Some(0));
    assert_eq!(emsem(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(emsem(&[]).status.code(), Some(1));
    assert_eq!(emsem(&["se", "--method", "newton", "--fixture", "linkage"]).status.code(), Some(1));
    assert_eq!(emsem(&["fit", "--model", "nope"]).status.code(), Some(1));
    assert_eq!(emsem(&["fit"]).status.code(), Some(1));
    assert_eq!(emsem(&["--rel-tol", "0", "fit", "--model", "m2pl5"]).status.code(), Some(1));
    let out = emsem(&["fit", "--spec", "/nonexistent/model.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/model.toml"));
}

#[test]
fn linkage_standard_error_matches_analytic() {
    let m = LinkageModel::default();
    let want = m.observed_information(m.mle()).powf(-0.5);
    for method in ["mr", "tian", "agile", "richardson"] {
        let out = emsem(&["se", "--method", method, "--fixture", "linkage"]);
        assert_eq!(out.status.code(), Some(0), "{method}");
        let report = json(&out);
        let se = report["parameters"][0]["se"].as_f64().unwrap();
        assert!((se / want - 1.0).abs() < 0.01, "{method}: {se} vs {want}");
        if method == "agile" {
            assert_eq!(report["evaluations"], 3);
        }
    }
}

#[test]
fn iteration_limit_is_a_fit_failure() {
    let out = emsem(&["--max-iter", "2", "fit", "--model", "m2pl5", "--n", "300"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_then_fit_and_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let out = emsem(&["--seed", "4", "--out", path(&sim), "simulate", "--model", "m2pl5", "--n", "600"]);
    assert_eq!(out.status.code(), Some(0));
    let data = sim.join("g1.csv");
    assert!(data.exists());

    let fit_dir = dir.path().join("fit");
    let out = emsem(&["--out", path(&fit_dir), "fit", "--model", "m2pl5", "--data", path(&data)]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert_eq!(report["converged"], true);
    assert_eq!(report["parameters"].as_array().unwrap().len(), 10);
    let fitted = io::load_spec(&fit_dir.join("fitted.toml")).unwrap();
    assert_eq!(fitted.groups[0].items.len(), 5);

    // Refitting from the fitted spec starts at the optimum.
    let out = emsem(&["fit", "--spec", path(&fit_dir.join("fitted.toml")), "--data", path(&data)]);
    let again = json(&out);
    let ll = |v: &Value| v["log_likelihood"].as_f64().unwrap();
    assert!((ll(&again) - ll(&report)).abs() < 1e-6 * ll(&report).abs());

    let se_dir = dir.path().join("se");
    let out = emsem(&["--out", path(&se_dir), "se", "--method", "agile", "--model", "m2pl5", "--data", path(&data)]);
    assert_eq!(out.status.code(), Some(0));
    let (names, v) = io::read_matrix_csv(&std::fs::read_to_string(se_dir.join("covariance.csv")).unwrap()).unwrap();
    assert_eq!(names.len(), 10);
    let report = json(&out);
    for (j, p) in report["parameters"].as_array().unwrap().iter().enumerate() {
        assert!((p["se"].as_f64().unwrap() - v[(j, j)].sqrt()).abs() < 1e-12);
    }
    assert!(se_dir.join("information.csv").exists());
}

#[test]
fn simulation_is_seeded() {
    let a = emsem(&["--seed", "7", "simulate", "--model", "m2pl5", "--n", "50"]);
    let b = emsem(&["--seed", "7", "simulate", "--model", "m2pl5", "--n", "50"]);
    let c = emsem(&["--seed", "8", "simulate", "--model", "m2pl5", "--n", "50"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn small_study_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let study = dir.path().join("study.toml");
    std::fs::write(
        &study,
        "model = \"m2pl5\"\nreplications = 2\nsample_size = 400\nestimators = [\"mstep\", \"agile\", \"richardson\"]\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = emsem(&["--out", path(&out_dir), "study", path(&study)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let failures = std::fs::read_to_string(out_dir.join("failures.csv")).unwrap();
    let mut lines = failures.lines();
    assert_eq!(lines.next(), Some("estimator,trials,failures,failure_pct"));
    assert_eq!(lines.count(), 3);
    let accuracy = std::fs::read_to_string(out_dir.join("accuracy.csv")).unwrap();
    assert!(accuracy.starts_with("estimator,mean_seconds,mean_evaluations,mean_log_kl,mean_rd,mean_mre"));
    let trials = std::fs::read_to_string(out_dir.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 2 * 3);
}

#[test]
fn noise_curve_and_target_sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = emsem(&["--out", path(dir.path()), "noise-curve", "--model", "m2pl5", "--n", "800", "--params", "0,3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(dir.path().join("noise_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2 * 10);
    let fit = std::fs::read_to_string(dir.path().join("noise_fit.csv")).unwrap();
    assert_eq!(fit.lines().next(), Some("param,name,beta,r2,log_one_minus_r2"));
    assert_eq!(fit.lines().count(), 3);

    let out = emsem(&["target-sweep", "--model", "m2pl5", "--n", "800", "--targets", "-7,-5.2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("ln_target,log_kl,rd,mre,failure"));
    assert!(lines.next().unwrap().starts_with("-7,"));
    assert!(lines.next().unwrap().starts_with("-5.2,"));
}
