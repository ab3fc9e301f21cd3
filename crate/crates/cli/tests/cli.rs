use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use corerl::environments::{linearize_known_model, CartPoleParams, PRIOR_MODEL_PERTURBATION};
use corerl::harness::{RunConfig, SweepSpec, EPISODES_CSV};
use corerl::robust_control::PlantSpec;
use serde_json::Value;

fn corerl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corerl")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_RUN: &str = "episodes = 3\nseed = 4\n[mixing]\nmode = \"fixed\"\nlambda = 2.0\n\
                         [agent]\nhidden = 8\nwarmup = 40\nbatch_size = 16\n";

#[test]
fn shipped_configs_parse() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.starts_with("train_") {
            RunConfig::load(&path).unwrap();
        } else if name.starts_with("sweep_") {
            SweepSpec::load(&path).unwrap();
        }
    }
}

#[test]
fn synth_scalar_plant() {
    let v = stdout_json(&corerl(&["synth", "--config", p(&configs().join("scalar_plant.toml"))]));
    assert!((v["zeta"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert_eq!(v["closed_loop_hurwitz"], Value::Bool(true));
}

#[test]
fn synth_infeasible_bracket_exit_code() {
    let out = corerl(&["synth", "--config", p(&configs().join("scalar_plant.toml")), "--gamma-hi", "0.5"]);
    assert_eq!(out.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&out.stderr).contains("InfeasibleBracket"));
}

#[test]
fn synth_cartpole_plant_is_hurwitz() {
    let tmp = tempfile::tempdir().unwrap();
    let plant = linearize_known_model(&CartPoleParams::<f64>::default().perturbed(PRIOR_MODEL_PERTURBATION));
    let file = tmp.path().join("cartpole.toml");
    fs::write(&file, toml::to_string(&PlantSpec::from_plant(&plant)).unwrap()).unwrap();
    let v = stdout_json(&corerl(&["synth", "--config", p(&file)]));
    assert_eq!(v["closed_loop_hurwitz"], Value::Bool(true));
    assert_eq!(v["K"][0].as_array().unwrap().len(), 4);
}

#[test]
fn train_is_deterministic_and_seed_flag_applies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let summary = stdout_json(&corerl(&["train", "--config", p(&cfg), "--out", p(&a)]));
    assert_eq!(summary["episodes_completed"], 3);
    stdout_json(&corerl(&["train", "--config", p(&cfg), "--out", p(&b)]));
    let v = stdout_json(&corerl(&["train", "--config", p(&cfg), "--out", p(&c), "--seed", "9"]));
    assert_eq!(v["seed"], 9);
    let csv = |d: &Path| fs::read(d.join(EPISODES_CSV)).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_ne!(csv(&a), csv(&c));
    for f in ["checkpoint.json", "summary.json"] {
        assert!(a.join(f).is_file());
    }
}

#[test]
fn huge_lambda_tracks_the_prior() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, SMALL_RUN.replace("lambda = 2.0", "lambda = 1e6")).unwrap();
    let v = stdout_json(&corerl(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]));
    // the prior alone keeps the pole near upright from the reset spread
    assert!(v["max_dev_theta"].as_f64().unwrap() < 0.1);
    assert_eq!(v["terminations"], 0);
}

#[test]
fn train_missing_key_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 1\n[mixing]\nmode = \"fixed\"\nlambda = 1.0\n").unwrap();
    let out = corerl(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ConfigError") && err.contains("episodes"), "{err}");
}

#[test]
fn sweep_then_stability_report() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("sweep.toml");
    fs::write(
        &spec,
        "episodes = 2\nseeds = [0, 1]\nlambdas = [8.0, 0.5]\n[agent]\nhidden = 8\nwarmup = 40\nbatch_size = 16\n",
    )
    .unwrap();
    let out = tmp.path().join("sweep");
    let rows = stdout_json(&corerl(&["sweep", "--config", p(&spec), "--out", p(&out), "--parallel", "2"]));
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(out.join("aggregate.csv").is_file());
    assert!(out.join("lambda_0.5").join("seed_1").join(EPISODES_CSV).is_file());

    let report_dir = tmp.path().join("report");
    let v = stdout_json(&corerl(&["stability-report", "--runs", p(&out), "--out", p(&report_dir)]));
    let radii: Vec<f64> = v["rows"].as_array().unwrap().iter().map(|r| r["radius"].as_f64().unwrap()).collect();
    assert_eq!(radii.len(), 2);
    assert!(radii[1] <= radii[0]);
    assert!(report_dir.join("report.csv").is_file());

    let v = stdout_json(&corerl(&["stability-report", "--runs", p(&out), "--c-d", "0", "--c-pi", "0"]));
    assert!(v["rows"].as_array().unwrap().iter().all(|r| r["radius"].as_f64() == Some(0.0)));

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = corerl(&["stability-report", "--runs", p(&empty)]);
    assert_eq!(out.status.code(), Some(30));
}

#[test]
fn diagnose_passes_by_default() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("diag.json");
    let v = stdout_json(&corerl(&["diagnose", "--out", p(&file)]));
    assert_eq!(v["passed"], Value::Bool(true));
    let names: Vec<&str> = v["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"theorem1_mixture_bounds"));
    // both readings of the mixed policy are reported
    let t1 = v["checks"].as_array().unwrap().iter().find(|c| c["name"] == "theorem1_mixture_bounds").unwrap();
    let text = t1["details"].to_string();
    assert!(text.contains("mixture_tv") && text.contains("averaging_tv"));
    assert!(file.is_file());
}

#[test]
fn diagnose_catches_a_wrong_mixing_exponent() {
    let out = corerl(&["diagnose", "--samples", "100000", "--inject-mixing-exponent", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let failures: Vec<&str> = v["failures"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(failures.iter().any(|f| f.starts_with("variance_factor")), "{failures:?}");
}
