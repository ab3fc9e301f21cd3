//! Experiment files, single runs and multi-seed sweeps on disk.
//!
//! A run directory holds `episodes.csv`, `checkpoint.json` and
//! `summary.json`; a sweep directory holds one run directory per
//! (λ, seed) cell plus `aggregate.csv` and `sweep_summary.json`.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::core_rl::{new_agent, train, EpisodeStats, MixingConfig, TrainConfig, TrainError, DEFAULT_DISCOUNT};
use crate::diagnostics::ensemble_stats;
use crate::environments::{
    CarFollowEnv, CarFollowParams, CartPoleEnv, CartPoleParams, EnvError, Environment, PRIOR_MODEL_PERTURBATION,
};
use crate::priors::{
    build_carfollow_prior, design_cartpole_prior, CartPoleDesign, ControlPrior, PriorError, DEFAULT_GAMMA_BACKOFF,
};
use crate::stability::{c_pi_bound, estimate_disturbance_bound, stability_radius, CartPoleRegion, StabilityError};

pub const EPISODES_CSV: &str = "episodes.csv";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const ERROR_JSON: &str = "error.json";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const SWEEP_SUMMARY_JSON: &str = "sweep_summary.json";

/// Episodes averaged for the "final reward" figures.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("run panicked: {0}")]
    Panic(String),
}

impl HarnessError {
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "ConfigError",
            HarnessError::Io { .. } => "IoError",
            HarnessError::Train(e) => e.code(),
            HarnessError::Prior(e) => e.code(),
            HarnessError::Env(_) => "EnvError",
            HarnessError::Stability(e) => e.code(),
            HarnessError::Panic(_) => "Panic",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

/// Seventeen significant digits, enough to round-trip any f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Which task to train on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    Cartpole {
        #[serde(default = "default_cartpole_horizon")]
        horizon: usize,
        #[serde(default)]
        params: CartPoleParams<f64>,
    },
    Carfollow {
        #[serde(default)]
        params: CarFollowParams<f64>,
    },
}

pub const DEFAULT_CARTPOLE_HORIZON: usize = 100;

fn default_cartpole_horizon() -> usize {
    DEFAULT_CARTPOLE_HORIZON
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Cartpole { horizon: DEFAULT_CARTPOLE_HORIZON, params: CartPoleParams::default() }
    }
}

impl EnvSpec {
    pub fn make_env(&self) -> Result<Box<dyn Environment<f64>>, HarnessError> {
        Ok(match self {
            EnvSpec::Cartpole { horizon, params } => Box::new(CartPoleEnv::new(*params, *horizon)?),
            EnvSpec::Carfollow { params } => Box::new(CarFollowEnv::new(params.clone())?),
        })
    }

    pub fn prior(&self) -> Result<ControlPrior<f64>, HarnessError> {
        Ok(match self {
            EnvSpec::Cartpole { params, .. } => self::cartpole_design(params)?.prior,
            EnvSpec::Carfollow { params } => build_carfollow_prior(params),
        })
    }
}

/// The H∞ design behind the default cartpole prior.
pub fn cartpole_design(params: &CartPoleParams<f64>) -> Result<CartPoleDesign<f64>, PriorError> {
    design_cartpole_prior(params, PRIOR_MODEL_PERTURBATION, DEFAULT_GAMMA_BACKOFF)
}

/// Contents of a `train` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub env: EnvSpec,
    pub episodes: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default)]
    pub seed: u64,
    pub mixing: MixingConfig,
    #[serde(default)]
    pub agent: AgentConfig,
}

fn default_discount() -> f64 {
    DEFAULT_DISCOUNT
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            episodes: self.episodes,
            discount: self.discount,
            seed: self.seed,
            mixing: self.mixing,
            agent: self.agent.clone(),
            log_steps: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSpec {
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
}

fn default_c() -> f64 {
    MixingConfig::DEFAULT_ADAPTIVE_C
}

fn default_lambda_max() -> f64 {
    MixingConfig::DEFAULT_ADAPTIVE_LAMBDA_MAX
}

/// Contents of a `sweep` file: every listed λ (and adaptive setting) is run
/// once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub env: EnvSpec,
    pub episodes: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub adaptive: Vec<AdaptiveSpec>,
    #[serde(default)]
    pub agent: AgentConfig,
    /// Used when no output directory is given on the command line.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn grid(&self) -> Vec<MixingConfig> {
        self.lambdas
            .iter()
            .map(|&lambda| MixingConfig::Fixed { lambda })
            .chain(self.adaptive.iter().map(|a| MixingConfig::Adaptive { c: a.c, lambda_max: a.lambda_max }))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if self.grid().is_empty() {
            return Err(HarnessError::Config("lambdas and adaptive are both empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds contain duplicates".into()));
        }
        for m in self.grid() {
            self.cell(m, self.seeds[0]).train_config().validate()?;
        }
        Ok(())
    }

    pub fn cell(&self, mixing: MixingConfig, seed: u64) -> RunConfig {
        RunConfig {
            env: self.env.clone(),
            episodes: self.episodes,
            discount: self.discount,
            seed,
            mixing,
            agent: self.agent.clone(),
        }
    }
}

/// Directory-safe name for a grid entry.
pub fn mixing_dir_name(m: &MixingConfig) -> String {
    let clean = |x: f64| format!("{x}").replace('-', "m");
    match *m {
        MixingConfig::Fixed { lambda } => format!("lambda_{}", clean(lambda)),
        MixingConfig::Adaptive { c, lambda_max } => format!("adaptive_c{}_max{}", clean(c), clean(lambda_max)),
    }
}

/// Value of the `lambda` column for a grid entry.
pub fn mixing_column(m: &MixingConfig) -> String {
    match *m {
        MixingConfig::Fixed { lambda } => fmt17(lambda),
        MixingConfig::Adaptive { .. } => m.label(),
    }
}

/// What `summary.json` records about a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub env: String,
    pub seed: u64,
    pub episodes_completed: usize,
    pub mean_reward: f64,
    /// Mean reward over the final (up to) ten episodes.
    pub final_mean_reward: f64,
    pub max_dev_theta: f64,
    pub mean_max_dev_theta: f64,
    pub max_dev_x: f64,
    pub max_state_norm: f64,
    pub mean_lambda: f64,
    pub terminations: usize,
    pub nan_events: usize,
    pub checkpoint: String,
}

impl RunSummary {
    fn new(config: &RunConfig, env: &str, stats: &[EpisodeStats<f64>]) -> Self {
        let n = stats.len().max(1) as f64;
        let mean = |f: fn(&EpisodeStats<f64>) -> f64| stats.iter().map(f).sum::<f64>() / n;
        let max = |f: fn(&EpisodeStats<f64>) -> f64| stats.iter().map(f).fold(0.0, f64::max);
        let tail = &stats[stats.len().saturating_sub(FINAL_WINDOW)..];
        let nan_events = stats
            .iter()
            .filter(|s| {
                ![s.reward, s.mean_lambda, s.mean_abs_td, s.max_dev_theta, s.max_dev_x, s.max_state_norm]
                    .iter()
                    .all(|v| v.is_finite())
            })
            .count();
        Self {
            config: config.clone(),
            env: env.to_string(),
            seed: config.seed,
            episodes_completed: stats.len(),
            mean_reward: mean(|s| s.reward),
            final_mean_reward: tail.iter().map(|s| s.reward).sum::<f64>() / tail.len().max(1) as f64,
            max_dev_theta: max(|s| s.max_dev_theta),
            mean_max_dev_theta: mean(|s| s.max_dev_theta),
            max_dev_x: max(|s| s.max_dev_x),
            max_state_norm: max(|s| s.max_state_norm),
            mean_lambda: mean(|s| s.mean_lambda),
            terminations: stats.iter().filter(|s| s.terminated).count(),
            nan_events,
            checkpoint: CHECKPOINT_JSON.to_string(),
        }
    }
}

/// A finished run: its summary and full episode series.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub summary: RunSummary,
    pub stats: Vec<EpisodeStats<f64>>,
    pub dir: PathBuf,
}

const EPISODE_HEADER: [&str; 10] = [
    "seed",
    "episode",
    "reward",
    "mean_lambda",
    "mean_abs_td",
    "max_dev_theta",
    "max_dev_x",
    "steps",
    "max_state_norm",
    "terminated",
];

fn episode_row(seed: u64, s: &EpisodeStats<f64>) -> [String; 10] {
    [
        seed.to_string(),
        s.episode.to_string(),
        fmt17(s.reward),
        fmt17(s.mean_lambda),
        fmt17(s.mean_abs_td),
        fmt17(s.max_dev_theta),
        fmt17(s.max_dev_x),
        s.steps.to_string(),
        fmt17(s.max_state_norm),
        s.terminated.to_string(),
    ]
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Io { path: path.into(), msg: e.to_string() })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Trains one run into `dir`. Episode rows are flushed as they finish, so a
/// failed run leaves its partial CSV behind.
pub fn run_training(config: &RunConfig, prior: &ControlPrior<f64>, dir: &Path) -> Result<RunRecord, HarnessError> {
    let tc = config.train_config();
    tc.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut env = config.env.make_env()?;
    let mut agent = new_agent(env.as_ref(), &config.agent, config.seed);

    let csv_path = dir.join(EPISODES_CSV);
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    let mut csv = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| HarnessError::Io { path: csv_path.clone(), msg: e.to_string() };
    csv.write_record(EPISODE_HEADER).map_err(csv_err)?;
    let mut write_failure = None;
    let result = train(&tc, env.as_mut(), prior, &mut agent, |s| {
        if write_failure.is_none() {
            if let Err(e) = csv.write_record(episode_row(config.seed, s)).and_then(|_| Ok(csv.flush()?)) {
                write_failure = Some(e);
            }
        }
    });
    csv.flush().map_err(io_err(&csv_path))?;
    if let Some(e) = write_failure {
        return Err(csv_err(e));
    }
    let out = result?;

    write_json(&dir.join(CHECKPOINT_JSON), &agent.checkpoint(config.seed, out.stats.len()))?;
    let summary = RunSummary::new(config, env.name(), &out.stats);
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    Ok(RunRecord { summary, stats: out.stats, dir: dir.to_path_buf() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub mixing: MixingConfig,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: Result<RunRecord, CellFailure>,
}

/// Per-grid-entry statistics across the seeds that finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaAggregate {
    pub lambda: String,
    pub mixing: MixingConfig,
    pub n_seeds: usize,
    pub failed_seeds: Vec<u64>,
    pub mean_reward: Vec<f64>,
    pub var_reward: Vec<f64>,
    /// Episode average of the across-seed reward variance.
    pub mean_variance: f64,
    pub final_mean_reward: f64,
    pub final_var_reward: f64,
    /// Seed average of each run's largest per-episode |θ| (or gap imbalance).
    pub mean_max_dev_theta: f64,
    pub max_dev_theta: f64,
    pub max_state_norm: f64,
    pub terminations: usize,
    pub nan_events: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellOutcome>,
    pub aggregates: Vec<LambdaAggregate>,
}

#[derive(Serialize)]
struct SweepSummaryFile<'a> {
    spec: &'a SweepSpec,
    aggregates: &'a [LambdaAggregate],
    failures: Vec<(String, u64, &'a CellFailure)>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn run_cell(config: &RunConfig, prior: &ControlPrior<f64>, dir: &Path) -> Result<RunRecord, CellFailure> {
    let result = catch_unwind(AssertUnwindSafe(|| run_training(config, prior, dir)))
        .unwrap_or_else(|p| Err(HarnessError::Panic(panic_message(p))));
    result.map_err(|e| {
        let failure = CellFailure { code: e.code().to_string(), message: e.to_string() };
        // best effort: the failure is also returned to the caller
        let _ = fs::create_dir_all(dir).map(|_| write_json(&dir.join(ERROR_JSON), &failure));
        failure
    })
}

/// Runs every (grid entry, seed) cell on up to `parallel` threads, then
/// aggregates across seeds and writes `aggregate.csv`.
///
/// A failing cell is recorded in its own `error.json` and left out of the
/// aggregates.
pub fn run_sweep(spec: &SweepSpec, out: &Path, parallel: usize) -> Result<SweepOutcome, HarnessError> {
    use rayon::prelude::*;

    spec.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let prior = spec.env.prior()?;
    let jobs: Vec<(MixingConfig, u64)> = spec
        .grid()
        .into_iter()
        .flat_map(|m| spec.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let cells: Vec<CellOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mixing, seed)| {
                let dir = out.join(mixing_dir_name(&mixing)).join(format!("seed_{seed}"));
                let result = run_cell(&spec.cell(mixing, seed), &prior, &dir);
                CellOutcome { mixing, seed, dir, result }
            })
            .collect()
    });

    let aggregates: Vec<LambdaAggregate> = spec.grid().iter().filter_map(|m| aggregate(m, &cells)).collect();
    write_aggregate_csv(&out.join(AGGREGATE_CSV), &aggregates)?;
    let failures = cells
        .iter()
        .filter_map(|c| c.result.as_ref().err().map(|f| (mixing_column(&c.mixing), c.seed, f)))
        .collect();
    write_json(&out.join(SWEEP_SUMMARY_JSON), &SweepSummaryFile { spec, aggregates: &aggregates, failures })?;
    Ok(SweepOutcome { cells, aggregates })
}

fn aggregate(m: &MixingConfig, cells: &[CellOutcome]) -> Option<LambdaAggregate> {
    let mine: Vec<&CellOutcome> = cells.iter().filter(|c| c.mixing == *m).collect();
    let runs: Vec<&RunRecord> = mine.iter().filter_map(|c| c.result.as_ref().ok()).collect();
    let failed_seeds = mine.iter().filter(|c| c.result.is_err()).map(|c| c.seed).collect();
    let rewards: Vec<Vec<f64>> = runs.iter().map(|r| r.stats.iter().map(|s| s.reward).collect()).collect();
    // fewer than two finished seeds: no across-seed statistics
    let ens = ensemble_stats(&rewards).ok()?;
    let n = runs.len() as f64;
    Some(LambdaAggregate {
        lambda: mixing_column(m),
        mixing: *m,
        n_seeds: ens.n_seeds,
        failed_seeds,
        mean_reward: ens.mean_reward,
        var_reward: ens.var_reward,
        mean_variance: ens.mean_variance,
        final_mean_reward: ens.final_mean_reward,
        final_var_reward: ens.final_var_reward,
        mean_max_dev_theta: runs.iter().map(|r| r.summary.max_dev_theta).sum::<f64>() / n,
        max_dev_theta: runs.iter().map(|r| r.summary.max_dev_theta).fold(0.0, f64::max),
        max_state_norm: runs.iter().map(|r| r.summary.max_state_norm).fold(0.0, f64::max),
        terminations: runs.iter().map(|r| r.summary.terminations).sum(),
        nan_events: runs.iter().map(|r| r.summary.nan_events).sum(),
    })
}

pub fn write_aggregate_csv(path: &Path, aggregates: &[LambdaAggregate]) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Io { path: path.to_path_buf(), msg: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["lambda", "episode", "mean_reward", "var_reward", "n_seeds"]).map_err(err)?;
    for a in aggregates {
        for (e, (m, v)) in a.mean_reward.iter().zip(&a.var_reward).enumerate() {
            w.write_record([a.lambda.clone(), e.to_string(), fmt17(*m), fmt17(*v), a.n_seeds.to_string()])
                .map_err(err)?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// One row of the stability report: a grid entry's certificate next to what
/// its runs actually did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub lambda_label: String,
    /// λ used in the radius; for adaptive runs the mean deployed λ.
    pub lambda: f64,
    pub runs: usize,
    pub sigma_m: f64,
    pub c_d: f64,
    pub c_pi: f64,
    pub radius: f64,
    pub observed_max_state_norm: f64,
    pub observed_max_theta: f64,
    pub observed_max_x: f64,
    /// Some run left the certified ball. Informational: the certificate is
    /// for the continuous-time linearization, the runs are discrete.
    pub certificate_exceeded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub disturbance_samples: usize,
    pub rows: Vec<StabilityRow>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StabilityOverrides {
    pub c_d: Option<f64>,
    pub c_pi: Option<f64>,
}

/// Finds every run under `dir` (a run or a sweep directory).
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join(SUMMARY_JSON).is_file() {
            found.push(d.clone());
        }
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn read_monitor(dir: &Path) -> Result<(f64, f64, f64, f64), HarnessError> {
    let path = dir.join(EPISODES_CSV);
    let missing = |what: &str| {
        HarnessError::Stability(StabilityError::MissingMonitorData(format!("{}: {what}", path.display())))
    };
    let mut r = csv::Reader::from_path(&path).map_err(|_| missing("cannot open"))?;
    let headers = r.headers().map_err(|_| missing("no header"))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| missing(name));
    let (ci_norm, ci_theta, ci_x, ci_lambda) =
        (col("max_state_norm")?, col("max_dev_theta")?, col("max_dev_x")?, col("mean_lambda")?);
    let (mut norm, mut theta, mut x, mut lambda_sum, mut rows) = (0.0f64, 0.0f64, 0.0f64, 0.0, 0usize);
    for rec in r.records() {
        let rec = rec.map_err(|_| missing("unreadable row"))?;
        let get = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| missing("bad number"));
        norm = norm.max(get(ci_norm)?);
        theta = theta.max(get(ci_theta)?);
        x = x.max(get(ci_x)?);
        lambda_sum += get(ci_lambda)?;
        rows += 1;
    }
    if rows == 0 {
        return Err(missing("no episodes"));
    }
    Ok((norm, theta, x, lambda_sum / rows as f64))
}

/// Radii for every grid entry found under `dir`, next to the observed
/// deviations. Only cartpole runs carry a linear plant to certify.
pub fn stability_report(dir: &Path, overrides: StabilityOverrides) -> Result<StabilityReport, HarnessError> {
    let runs = find_runs(dir)?;
    if runs.is_empty() {
        return Err(StabilityError::MissingMonitorData(format!("no runs under {}", dir.display())).into());
    }
    let mut groups: Vec<(MixingConfig, CartPoleParams<f64>, Vec<(f64, f64, f64, f64)>)> = Vec::new();
    for run in &runs {
        let path = run.join(SUMMARY_JSON);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let summary: RunSummary =
            serde_json::from_str(&text).map_err(|e| HarnessError::Io { path: path.clone(), msg: e.to_string() })?;
        let params = match summary.config.env {
            EnvSpec::Cartpole { params, .. } => params,
            EnvSpec::Carfollow { .. } => {
                return Err(StabilityError::InvalidInput(format!(
                    "{}: stability reports need cartpole runs",
                    run.display()
                ))
                .into())
            }
        };
        let monitor = read_monitor(run)?;
        match groups.iter_mut().find(|g| g.0 == summary.config.mixing && g.1 == params) {
            Some(g) => g.2.push(monitor),
            None => groups.push((summary.config.mixing, params, vec![monitor])),
        }
    }

    let region = CartPoleRegion::default();
    let mut rows = Vec::new();
    let mut disturbance_samples = 0;
    for (mixing, params, monitors) in groups {
        let design = cartpole_design(&params)?;
        let c_d = match overrides.c_d {
            Some(v) => v,
            None => {
                let f = params.force_limit;
                let b = estimate_disturbance_bound(&params, &design.plant, &region.grid(5), &[vec![-f], vec![0.0], vec![f]])?;
                disturbance_samples = b.samples;
                b.c_d
            }
        };
        let c_pi = overrides
            .c_pi
            .unwrap_or_else(|| c_pi_bound(&design.prior.bounds, &design.controller.k, region.radius()));
        let lambda = match mixing {
            MixingConfig::Fixed { lambda } => lambda,
            MixingConfig::Adaptive { .. } => monitors.iter().map(|m| m.3).sum::<f64>() / monitors.len() as f64,
        };
        let cert = stability_radius(&design.plant, &design.controller, c_d, c_pi, lambda)?;
        let max = |f: fn(&(f64, f64, f64, f64)) -> f64| monitors.iter().map(f).fold(0.0, f64::max);
        let observed_max_state_norm = max(|m| m.0);
        rows.push(StabilityRow {
            lambda_label: mixing_column(&mixing),
            lambda,
            runs: monitors.len(),
            sigma_m: cert.sigma_m,
            c_d,
            c_pi,
            radius: cert.radius,
            observed_max_state_norm,
            observed_max_theta: max(|m| m.1),
            observed_max_x: max(|m| m.2),
            certificate_exceeded: observed_max_state_norm > cert.radius,
        });
    }
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(StabilityReport { disturbance_samples, rows })
}

/// Writes the report rows as CSV.
pub fn write_stability_csv<W: Write>(report: &StabilityReport, writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "lambda_label",
        "lambda",
        "runs",
        "sigma_m",
        "c_d",
        "c_pi",
        "radius",
        "observed_max_state_norm",
        "observed_max_theta",
        "observed_max_x",
        "certificate_exceeded",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.lambda_label.clone(),
            fmt17(r.lambda),
            r.runs.to_string(),
            fmt17(r.sigma_m),
            fmt17(r.c_d),
            fmt17(r.c_pi),
            fmt17(r.radius),
            fmt17(r.observed_max_state_norm),
            fmt17(r.observed_max_theta),
            fmt17(r.observed_max_x),
            r.certificate_exceeded.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
