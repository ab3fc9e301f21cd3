//! `corerl` command line: controller synthesis, training runs, seed sweeps,
//! numerical diagnostics and stability reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corerl::diagnostics::{run_diagnostics, DiagnoseOptions};
use corerl::harness::{self, HarnessError, RunConfig, StabilityOverrides, SweepSpec};
use corerl::robust_control::{synthesize_hinf, ControllerReport, PlantSpec, DEFAULT_BISECTION_TOL};

#[derive(Parser)]
#[command(name = "corerl", version, about = "Control-regularized RL with robust control priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an H∞ state-feedback controller for a plant file and print it as JSON.
    Synth {
        /// Plant TOML with row-major matrices a, b1, b2, c1.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        gamma_lo: f64,
        #[arg(long, default_value_t = 1e4)]
        gamma_hi: f64,
        #[arg(long, default_value_t = DEFAULT_BISECTION_TOL)]
        tol: f64,
    },
    /// Train one run and write episodes.csv, checkpoint.json and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every (λ, seed) cell of a sweep file and aggregate across seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the file's `out`, then to runs/sweep.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Added to every seed in the file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the mixing argmin, the variance factor and the TV bounds numerically.
    Diagnose {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, hide = true, default_value_t = 1.0)]
        inject_mixing_exponent: f64,
    },
    /// Stability radii per λ for the cartpole runs under a run or sweep directory.
    StabilityReport {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        c_d: Option<f64>,
        #[arg(long)]
        c_pi: Option<f64>,
        /// Also write report.json and report.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Error code name and message, reported on stderr.
struct Failure {
    code: String,
    message: String,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure { code: e.code().to_string(), message: e.to_string() }
    }
}

fn failure(code: &str, message: impl ToString) -> Failure {
    Failure { code: code.to_string(), message: message.to_string() }
}

/// Process exit status for each error code name.
fn exit_status(code: &str) -> u8 {
    match code {
        "DiagnosticsFailed" => 1,
        "ConfigError" => 2,
        "IoError" => 3,
        "InfeasibleBracket" => 10,
        "NoStabilizingSolution" => 11,
        "NotStabilizable" => 12,
        "NotHurwitz" => 13,
        "SingularSystem" => 14,
        "ShapeMismatch" => 15,
        "EigenFailure" => 16,
        "InvalidInput" => 17,
        "SynthesisFailed" => 18,
        "NotStabilizing" => 19,
        "NonFiniteState" => 20,
        "NonFiniteLoss" => 21,
        "EnvError" => 22,
        "DimensionMismatch" => 23,
        "EmptyBuffer" | "BatchTooLarge" => 24,
        "CheckpointError" => 25,
        "MissingMonitorData" => 30,
        "DegenerateSigmaM" => 31,
        "MisalignedRuns" => 32,
        "Panic" => 40,
        _ => 1,
    }
}

fn json<S: serde::Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| failure("IoError", format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| failure("IoError", format!("{}: {e}", path.display())))
}

fn synth(config: &Path, gamma: (f64, f64), tol: f64) -> Result<(), Failure> {
    let text = fs::read_to_string(config).map_err(|e| failure("IoError", format!("{}: {e}", config.display())))?;
    let spec: PlantSpec = toml::from_str(&text).map_err(|e| failure("ConfigError", e.message()))?;
    let plant = spec.to_plant::<f64>().map_err(|e| failure(e.code(), &e))?;
    let ctrl = synthesize_hinf(&plant, gamma, tol).map_err(|e| failure(e.code(), &e))?;
    println!("{}", json(&ControllerReport::new(&plant, &ctrl)));
    Ok(())
}

fn train(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let prior = cfg.env.prior()?;
    let record = harness::run_training(&cfg, &prior, out)?;
    println!("{}", json(&record.summary));
    Ok(())
}

fn sweep(config: &Path, out: Option<PathBuf>, parallel: usize, seed: Option<u64>) -> Result<(), Failure> {
    let mut spec = SweepSpec::load(config)?;
    if let Some(offset) = seed {
        for s in &mut spec.seeds {
            *s = s.wrapping_add(offset);
        }
    }
    let out = out.or_else(|| spec.out.clone()).unwrap_or_else(|| PathBuf::from("runs/sweep"));
    let outcome = harness::run_sweep(&spec, &out, parallel)?;
    for c in &outcome.cells {
        if let Err(f) = &c.result {
            eprintln!("cell {} seed {} failed [{}]: {}", harness::mixing_column(&c.mixing), c.seed, f.code, f.message);
        }
    }
    println!("{}", json(&outcome.aggregates.iter().map(AggregateLine::from).collect::<Vec<_>>()));
    Ok(())
}

/// Per-λ headline numbers printed after a sweep; the full series is in aggregate.csv.
#[derive(serde::Serialize)]
struct AggregateLine<'a> {
    lambda: &'a str,
    n_seeds: usize,
    final_mean_reward: f64,
    final_var_reward: f64,
    mean_variance: f64,
    mean_max_dev_theta: f64,
    terminations: usize,
    nan_events: usize,
}

impl<'a> From<&'a harness::LambdaAggregate> for AggregateLine<'a> {
    fn from(a: &'a harness::LambdaAggregate) -> Self {
        Self {
            lambda: &a.lambda,
            n_seeds: a.n_seeds,
            final_mean_reward: a.final_mean_reward,
            final_var_reward: a.final_var_reward,
            mean_variance: a.mean_variance,
            mean_max_dev_theta: a.mean_max_dev_theta,
            terminations: a.terminations,
            nan_events: a.nan_events,
        }
    }
}

fn diagnose(seed: u64, out: Option<PathBuf>, samples: usize, exponent: f64) -> Result<(), Failure> {
    let opts = DiagnoseOptions { seed, variance_samples: samples, mixing_exponent: exponent, ..DiagnoseOptions::default() };
    let report = run_diagnostics(&opts).map_err(|e| failure("InvalidInput", e))?;
    let text = json(&report);
    if let Some(path) = out {
        write(&path, &(text.clone() + "\n"))?;
    }
    println!("{text}");
    if report.passed {
        Ok(())
    } else {
        Err(failure("DiagnosticsFailed", format!("failed checks: {}", report.failures.join(", "))))
    }
}

fn stability(runs: &Path, overrides: StabilityOverrides, out: Option<PathBuf>) -> Result<(), Failure> {
    let report = harness::stability_report(runs, overrides)?;
    let text = json(&report);
    if let Some(dir) = out {
        write(&dir.join("report.json"), &(text.clone() + "\n"))?;
        let mut csv = Vec::new();
        harness::write_stability_csv(&report, &mut csv).map_err(|e| failure("IoError", e))?;
        write(&dir.join("report.csv"), &String::from_utf8_lossy(&csv))?;
    }
    for r in report.rows.iter().filter(|r| r.certificate_exceeded) {
        eprintln!(
            "certificate exceeded at lambda {}: max |s| {} > radius {}",
            r.lambda_label, r.observed_max_state_norm, r.radius
        );
    }
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, gamma_lo, gamma_hi, tol } => synth(&config, (gamma_lo, gamma_hi), tol),
        Command::Train { config, out, seed } => train(&config, &out, seed),
        Command::Sweep { config, out, parallel, seed } => sweep(&config, out, parallel, seed),
        Command::Diagnose { seed, out, samples, inject_mixing_exponent } => {
            diagnose(seed, out, samples, inject_mixing_exponent)
        }
        Command::StabilityReport { runs, c_d, c_pi, out } => stability(&runs, StabilityOverrides { c_d, c_pi }, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.message);
            ExitCode::from(exit_status(&f.code))
        }
    }
}
