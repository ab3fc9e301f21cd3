//! The training loop: mix the learned policy with the control prior, deploy,
//! store, update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, AgentError, ReplayBuffer, Transition};
use crate::environments::{ActionBounds, EnvError, Environment};
use crate::priors::{ControlPrior, PriorError};
use crate::rng::{child_rng, StreamLabel};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("environment failed at episode {episode}, step {step}: {source}")]
    Env { episode: usize, step: usize, source: EnvError },
    #[error("agent failed at episode {episode}, step {step}: {source}")]
    Agent { episode: usize, step: usize, source: AgentError },
    #[error("prior failed at episode {episode}, step {step}: {source}")]
    Prior { episode: usize, step: usize, source: PriorError },
    #[error("action dimensions differ: {0}")]
    DimensionMismatch(String),
}

impl TrainError {
    pub fn code(&self) -> &'static str {
        match self {
            TrainError::InvalidConfig(_) => "ConfigError",
            TrainError::Env { source: EnvError::NonFiniteState(_), .. } => "NonFiniteState",
            TrainError::Env { .. } => "EnvError",
            TrainError::Agent { source, .. } => source.code(),
            TrainError::Prior { source, .. } => source.code(),
            TrainError::DimensionMismatch(_) => "DimensionMismatch",
        }
    }
}

/// How the regularization weight λ is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum MixingConfig {
    Fixed { lambda: f64 },
    /// λ = λ_max(1 − exp(−C|δ|)) from the previous step's TD error.
    Adaptive { c: f64, lambda_max: f64 },
}

impl MixingConfig {
    pub const DEFAULT_ADAPTIVE_C: f64 = 10.0;
    pub const DEFAULT_ADAPTIVE_LAMBDA_MAX: f64 = 15.0;

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            MixingConfig::Fixed { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(format!("lambda must be finite and non-negative, got {lambda}"))
            }
            MixingConfig::Adaptive { c, lambda_max } if !(c > 0.0 && c.is_finite()) => {
                Err(format!("adaptive C must be positive, got {c} (lambda_max {lambda_max})"))
            }
            MixingConfig::Adaptive { lambda_max, .. } if !(lambda_max > 0.0 && lambda_max.is_finite()) => {
                Err(format!("lambda_max must be positive, got {lambda_max}"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in file names and tables.
    pub fn label(&self) -> String {
        match *self {
            MixingConfig::Fixed { lambda } => format!("{lambda}"),
            MixingConfig::Adaptive { c, lambda_max } => format!("adaptive(C={c},max={lambda_max})"),
        }
    }
}

/// (u_rl + λ·u_prior)/(1 + λ), without clipping.
pub fn mix_means<T: Scalar>(u_rl: &[T], u_prior: &[T], lambda: T) -> Result<Vec<T>, TrainError> {
    if u_rl.len() != u_prior.len() {
        return Err(TrainError::DimensionMismatch(format!(
            "RL action has {} entries, prior action {}",
            u_rl.len(),
            u_prior.len()
        )));
    }
    let w = T::one() / (T::one() + lambda);
    Ok(u_rl.iter().zip(u_prior).map(|(&r, &p)| w * r + lambda * w * p).collect())
}

/// Mixed action clipped to `bounds`.
pub fn mix_action<T: Scalar>(u_rl: &[T], u_prior: &[T], lambda: T, bounds: &ActionBounds<T>) -> Result<Vec<T>, TrainError> {
    let mut a = mix_means(u_rl, u_prior, lambda)?;
    if a.len() != bounds.dim() {
        return Err(TrainError::DimensionMismatch(format!(
            "action has {} entries, bounds {}",
            a.len(),
            bounds.dim()
        )));
    }
    bounds.clip(&mut a);
    Ok(a)
}

/// λ_max(1 − e^{−C|δ|}) in [0, λ_max).
///
/// When the exact value rounds up to λ_max the largest representable value
/// below it is returned instead, so the bound stays strict.
pub fn adaptive_lambda<T: Scalar>(delta_prev: T, c: T, lambda_max: T) -> T {
    let lambda = -lambda_max * (-c * delta_prev.abs()).exp_m1();
    if lambda >= lambda_max {
        lambda_max * (T::one() - T::eps())
    } else {
        lambda
    }
}

/// Settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default)]
    pub seed: u64,
    pub mixing: MixingConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    /// Keep a per-step record of every deployed action.
    #[serde(default)]
    pub log_steps: bool,
}

pub const DEFAULT_DISCOUNT: f64 = 0.99;

fn default_discount() -> f64 {
    DEFAULT_DISCOUNT
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.episodes == 0 {
            return bad("episodes must be at least 1".into());
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount must lie in (0, 1), got {}", self.discount));
        }
        self.mixing.validate().map_err(TrainError::InvalidConfig)?;
        self.agent.validate().map_err(TrainError::InvalidConfig)
    }
}

/// Per-episode summary.
///
/// `max_dev_theta` / `max_dev_x` hold the environment's primary and secondary
/// deviation measures: |θ| and |x| for cartpole, the gap imbalance and the
/// front-relative speed for car following.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EpisodeStats<T: Scalar> {
    pub episode: usize,
    pub steps: usize,
    pub reward: T,
    pub mean_lambda: T,
    pub mean_abs_td: T,
    pub max_dev_theta: T,
    pub max_dev_x: T,
    /// Largest Euclidean norm of the raw observation over the episode.
    pub max_state_norm: T,
    /// Ended by a guard or collision rather than by the horizon.
    pub terminated: bool,
}

/// One deployed step, kept when `log_steps` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T: Scalar> {
    pub episode: usize,
    pub step: usize,
    pub obs: Vec<T>,
    pub a_rl: Vec<T>,
    pub a_prior: Vec<T>,
    pub a_deployed: Vec<T>,
    pub lambda: T,
    pub td: T,
    pub reward: T,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T: Scalar> {
    pub stats: Vec<EpisodeStats<T>>,
    pub steps: Vec<StepRecord<T>>,
}

/// Builds an agent for `env` from the network-initialization stream of `seed`.
pub fn new_agent<T: Scalar>(env: &dyn Environment<T>, config: &AgentConfig, seed: u64) -> Agent<T> {
    let mut rng = child_rng(seed, StreamLabel::NetworkInit);
    Agent::new(env.observation_scale(), env.action_bounds().clone(), config.clone(), &mut rng)
}

/// Runs `config.episodes` episodes of mixed-policy control, updating `agent`
/// once per environment step after the replay warm-up. `on_episode` sees
/// each episode's stats as soon as it finishes.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    env: &mut dyn Environment<T>,
    prior: &ControlPrior<T>,
    agent: &mut Agent<T>,
    mut on_episode: impl FnMut(&EpisodeStats<T>),
) -> Result<TrainOutput<T>, TrainError> {
    config.validate()?;
    if prior.action_dim() != env.action_dim() || agent.policy.action_dim() != env.action_dim() {
        return Err(TrainError::DimensionMismatch(format!(
            "env {}, prior {}, policy {}",
            env.action_dim(),
            prior.action_dim(),
            agent.policy.action_dim()
        )));
    }
    let mut env_rng = child_rng(config.seed, StreamLabel::Environment);
    let mut noise_rng = child_rng(config.seed, StreamLabel::PolicyNoise);
    let mut replay_rng = child_rng(config.seed, StreamLabel::ReplaySampling);
    let ac = &config.agent;
    let mut buffer = ReplayBuffer::new(ac.replay_capacity);
    let discount = T::of(config.discount);
    let decay = T::of(ac.exploration_decay);
    let start_updates = ac.warmup.max(ac.batch_size);
    let bounds = env.action_bounds().clone();

    let mut stats = Vec::with_capacity(config.episodes);
    let mut steps = Vec::new();
    for episode in 0..config.episodes {
        let mut obs = env.reset(&mut env_rng);
        let mut prev_td: Option<T> = None;
        let mut ep = EpisodeStats {
            episode,
            steps: 0,
            reward: T::zero(),
            mean_lambda: T::zero(),
            mean_abs_td: T::zero(),
            max_dev_theta: T::zero(),
            max_dev_x: T::zero(),
            max_state_norm: norm(&obs),
            terminated: false,
        };
        let mut u_prior = prior
            .evaluate(&obs)
            .map_err(|source| TrainError::Prior { episode, step: 0, source })?;
        for step in 0..env.horizon() {
            let u_rl = agent.policy.sample_action(&obs, &mut noise_rng);
            let lambda = match config.mixing {
                MixingConfig::Fixed { lambda } => T::of(lambda),
                MixingConfig::Adaptive { c, lambda_max } => match prev_td {
                    // no TD error yet: lean fully on the prior
                    None => T::of(lambda_max),
                    Some(d) => adaptive_lambda(d, T::of(c), T::of(lambda_max)),
                },
            };
            let a = mix_action(&u_rl, &u_prior, lambda, &bounds)?;
            let r = env
                .step(&a)
                .map_err(|source| TrainError::Env { episode, step, source })?;
            let dev = env.deviations();
            let prior_next = prior
                .evaluate(&r.next_state)
                .map_err(|source| TrainError::Prior { episode, step: step + 1, source })?;
            let t = Transition {
                s: obs,
                a,
                a_rl: u_rl,
                prior: u_prior,
                prior_next: prior_next.clone(),
                lambda,
                r: r.reward,
                s_next: r.next_state,
                terminal: r.terminal,
            };
            let td = agent.td_error(&t, discount);
            prev_td = Some(td);

            ep.steps += 1;
            ep.reward += t.r;
            ep.mean_lambda += lambda;
            ep.mean_abs_td += td.abs();
            ep.max_dev_theta = ep.max_dev_theta.max(dev.primary);
            ep.max_dev_x = ep.max_dev_x.max(dev.secondary);
            ep.max_state_norm = ep.max_state_norm.max(norm(&t.s_next));
            ep.terminated = r.guard;
            if config.log_steps {
                steps.push(StepRecord {
                    episode,
                    step,
                    obs: t.s.clone(),
                    a_rl: t.a_rl.clone(),
                    a_prior: t.prior.clone(),
                    a_deployed: t.a.clone(),
                    lambda,
                    td,
                    reward: t.r,
                });
            }
            obs = t.s_next.clone();
            u_prior = prior_next;
            buffer.push(t);

            if buffer.len() >= start_updates {
                let batch = buffer
                    .sample(ac.batch_size, &mut replay_rng)
                    .map_err(|source| TrainError::Agent { episode, step, source })?;
                agent
                    .update(&batch, discount)
                    .map_err(|source| TrainError::Agent { episode, step, source })?;
            }
            if r.done {
                break;
            }
        }
        let n = T::from_usize(ep.steps.max(1)).expect("step count");
        ep.mean_lambda /= n;
        ep.mean_abs_td /= n;
        agent.policy.decay_std(decay);
        on_episode(&ep);
        stats.push(ep);
    }
    Ok(TrainOutput { stats, steps })
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}
