//! DDPG-style learner: Gaussian exploration around a deterministic actor, a
//! Q critic, target networks with soft updates, and a replay buffer.

mod mlp;
mod replay;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environments::ActionBounds;
use crate::rng::SimRng;
use crate::Scalar;

pub use mlp::{flatten, Adam, Layer, Mlp, MlpCache, MlpGrads};
pub use replay::ReplayBuffer;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("batch of {requested} requested from a buffer holding {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("non-finite {which} loss ({value})")]
    NonFiniteLoss { which: &'static str, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl AgentError {
    pub fn code(&self) -> &'static str {
        match self {
            AgentError::EmptyBuffer => "EmptyBuffer",
            AgentError::BatchTooLarge { .. } => "BatchTooLarge",
            AgentError::NonFiniteLoss { .. } => "NonFiniteLoss",
            AgentError::DimensionMismatch(_) => "DimensionMismatch",
            AgentError::Checkpoint(_) => "CheckpointError",
        }
    }
}

/// Learner hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Width of each of the two hidden layers.
    pub hidden: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Target-network soft-update rate τ.
    pub soft_update: f64,
    /// Transitions collected before gradient updates start.
    pub warmup: usize,
    /// Initial exploration std as a fraction of each action dimension's range.
    pub exploration_std: f64,
    /// Per-episode multiplicative decay of the exploration std.
    pub exploration_decay: f64,
    /// Rewards are multiplied by this before entering the critic's regression
    /// target; Q values and TD errors are in the scaled units.
    pub reward_scale: f64,
    /// Weight of the L2 penalty on the actor's pre-tanh output. Keeps the
    /// actor out of the saturated region where its gradient vanishes.
    pub actor_preact_l2: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            batch_size: 64,
            replay_capacity: 100_000,
            soft_update: 0.005,
            warmup: 1000,
            exploration_std: 0.1,
            exploration_decay: 0.995,
            reward_scale: 0.01,
            actor_preact_l2: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        let checks: [(bool, &str); 9] = [
            (self.hidden > 0, "hidden must be positive"),
            (self.lr_actor >= 0.0 && self.lr_critic >= 0.0, "learning rates must be non-negative"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.replay_capacity >= self.batch_size, "replay_capacity must be at least batch_size"),
            (self.soft_update > 0.0 && self.soft_update <= 1.0, "soft_update must lie in (0, 1]"),
            (self.exploration_std >= 0.0, "exploration_std must be non-negative"),
            (self.exploration_decay > 0.0 && self.exploration_decay <= 1.0, "exploration_decay must lie in (0, 1]"),
            (self.reward_scale > 0.0 && self.reward_scale.is_finite(), "reward_scale must be positive"),
            (self.actor_preact_l2 >= 0.0 && self.actor_preact_l2.is_finite(), "actor_preact_l2 must be non-negative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err((*msg).to_string()),
            None => Ok(()),
        }
    }
}

/// One stored step. `a` is the deployed (mixed) action; `a_rl` the raw
/// policy sample it was mixed from.
///
/// The critic scores deployed actions, so the learner re-mixes its own
/// output with `prior` (at `s`) and `prior_next` (at `s_next`) using `lambda`
/// whenever it queries the critic at a policy action.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T: Scalar> {
    pub s: Vec<T>,
    pub a: Vec<T>,
    pub a_rl: Vec<T>,
    pub prior: Vec<T>,
    pub prior_next: Vec<T>,
    pub lambda: T,
    pub r: T,
    pub s_next: Vec<T>,
    /// Absorbing transition; no bootstrapping from `s_next`.
    pub terminal: bool,
}

impl<T: Scalar> Transition<T> {
    /// Transition of an unmixed policy (λ = 0).
    pub fn unmixed(s: Vec<T>, a: Vec<T>, r: T, s_next: Vec<T>, terminal: bool) -> Self {
        let zeros = vec![T::zero(); a.len()];
        Self {
            s,
            a_rl: a.clone(),
            a,
            prior: zeros.clone(),
            prior_next: zeros,
            lambda: T::zero(),
            r,
            s_next,
            terminal,
        }
    }

    /// Weight 1/(1+λ) of the policy action in the mix.
    pub fn policy_weight(&self) -> T {
        T::one() / (T::one() + self.lambda)
    }
}

/// Stacks observations as scaled columns.
fn obs_matrix<'a, T: Scalar>(obs: impl ExactSizeIterator<Item = &'a [T]>, scale: &[T]) -> DMatrix<T> {
    let n = obs.len();
    let mut m = DMatrix::zeros(scale.len(), n);
    for (j, o) in obs.enumerate() {
        for i in 0..scale.len() {
            m[(i, j)] = o[i] * scale[i];
        }
    }
    m
}

fn stack<T: Scalar>(top: &DMatrix<T>, bottom: &DMatrix<T>) -> DMatrix<T> {
    let mut m = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    m.rows_mut(0, top.nrows()).copy_from(top);
    m.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    m
}

/// π(a|s) = N(ū(s), diag(std²)) with ū from a tanh-squashed actor, so the
/// mean always lies strictly inside the action box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GaussianPolicy<T: Scalar> {
    pub actor: Mlp<T>,
    pub target: Mlp<T>,
    pub obs_scale: Vec<T>,
    pub bounds: ActionBounds<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> GaussianPolicy<T> {
    pub fn action_dim(&self) -> usize {
        self.bounds.dim()
    }

    fn denormalize(&self, z: &[T]) -> Vec<T> {
        let (c, h) = (self.bounds.center(), self.bounds.half_range());
        z.iter().zip(c.iter().zip(&h)).map(|(&z, (&c, &h))| c + h * z).collect()
    }

    /// Maps an action into the actor's (−1, 1) output coordinates.
    pub fn normalize(&self, a: &[T]) -> Vec<T> {
        let (c, h) = (self.bounds.center(), self.bounds.half_range());
        a.iter().zip(c.iter().zip(&h)).map(|(&a, (&c, &h))| (a - c) / h).collect()
    }

    pub fn mean(&self, obs: &[T]) -> Vec<T> {
        let x = obs_matrix(std::iter::once(obs), &self.obs_scale);
        let z = self.actor.forward(&x);
        self.denormalize(z.as_slice())
    }

    /// ū(s) + ε with ε ~ N(0, diag(std²)), clipped to the bounds.
    pub fn sample_action(&self, obs: &[T], rng: &mut SimRng) -> Vec<T> {
        let mut a = self.mean(obs);
        for (ai, &sd) in a.iter_mut().zip(&self.std) {
            let eps: f64 = StandardNormal.sample(rng);
            *ai += sd * T::of(eps);
        }
        self.bounds.clip(&mut a);
        a
    }

    pub fn decay_std(&mut self, factor: T) {
        for s in &mut self.std {
            *s *= factor;
        }
    }
}

/// Q(s, a) on scaled observations and normalized actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct QCritic<T: Scalar> {
    pub net: Mlp<T>,
    pub target: Mlp<T>,
}

impl<T: Scalar> QCritic<T> {
    pub fn q(&self, policy: &GaussianPolicy<T>, obs: &[T], action: &[T]) -> T {
        let x = stack(
            &obs_matrix(std::iter::once(obs), &policy.obs_scale),
            &DMatrix::from_column_slice(action.len(), 1, &policy.normalize(action)),
        );
        self.net.forward(&x)[(0, 0)]
    }
}

/// w·z + (1 − w)·p column by column, all in normalized action coordinates.
fn mix_columns<T: Scalar>(z: &DMatrix<T>, p: &DMatrix<T>, w: &[T]) -> DMatrix<T> {
    let mut out = z.clone();
    for (j, &wj) in w.iter().enumerate() {
        for i in 0..z.nrows() {
            out[(i, j)] = wj * z[(i, j)] + (T::one() - wj) * p[(i, j)];
        }
    }
    out
}

/// δ = r̃ + γ·Q(s', a') − Q(s, a) with the online critic, r̃ the scaled
/// reward, a' the target actor's mean at s' mixed with the prior at s', and no
/// bootstrap term after a terminal transition.
pub fn td_error<T: Scalar>(
    critic: &QCritic<T>,
    t: &Transition<T>,
    policy: &GaussianPolicy<T>,
    discount: T,
    reward_scale: T,
) -> T {
    let q = critic.q(policy, &t.s, &t.a);
    let next = if t.terminal {
        T::zero()
    } else {
        let x = obs_matrix(std::iter::once(t.s_next.as_slice()), &policy.obs_scale);
        let z = policy.target.forward(&x);
        let p = DMatrix::from_column_slice(z.nrows(), 1, &policy.normalize(&t.prior_next));
        let a = mix_columns(&z, &p, &[t.policy_weight()]);
        critic.net.forward(&stack(&x, &a))[(0, 0)]
    };
    reward_scale * t.r + discount * next - q
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats<T> {
    pub critic_loss: T,
    pub actor_loss: T,
}

/// Actor, critic, their optimizers and target copies.
#[derive(Debug, Clone)]
pub struct Agent<T: Scalar> {
    pub policy: GaussianPolicy<T>,
    pub critic: QCritic<T>,
    actor_opt: Adam<T>,
    critic_opt: Adam<T>,
    pub config: AgentConfig,
}

struct Batch<T: Scalar> {
    s: DMatrix<T>,
    a: DMatrix<T>,
    prior: DMatrix<T>,
    prior_next: DMatrix<T>,
    w: Vec<T>,
    r: Vec<T>,
    s_next: DMatrix<T>,
    terminal: Vec<bool>,
}

impl<T: Scalar> Agent<T> {
    /// Fresh networks drawn from `rng` (the network-initialization stream).
    pub fn new(obs_scale: Vec<T>, bounds: ActionBounds<T>, config: AgentConfig, rng: &mut SimRng) -> Self {
        let (n, m, h) = (obs_scale.len(), bounds.dim(), config.hidden);
        let actor = Mlp::new(&[n, h, h, m], true, 3e-3, rng);
        let critic = Mlp::new(&[n + m, h, h, 1], false, 3e-3, rng);
        let std = bounds
            .lo
            .iter()
            .zip(&bounds.hi)
            .map(|(&l, &h)| (h - l) * T::of(config.exploration_std))
            .collect();
        Self {
            actor_opt: Adam::new(actor.num_params()),
            critic_opt: Adam::new(critic.num_params()),
            policy: GaussianPolicy {
                target: actor.clone(),
                actor,
                obs_scale,
                bounds,
                std,
            },
            critic: QCritic {
                target: critic.clone(),
                net: critic,
            },
            config,
        }
    }

    pub fn td_error(&self, t: &Transition<T>, discount: T) -> T {
        td_error(&self.critic, t, &self.policy, discount, T::of(self.config.reward_scale))
    }

    fn batch(&self, batch: &[&Transition<T>]) -> Batch<T> {
        let p = &self.policy;
        let actions = |f: &dyn Fn(&Transition<T>) -> &[T]| {
            let mut m = DMatrix::zeros(p.action_dim(), batch.len());
            for (j, t) in batch.iter().enumerate() {
                for (i, v) in p.normalize(f(t)).into_iter().enumerate() {
                    m[(i, j)] = v;
                }
            }
            m
        };
        Batch {
            s: obs_matrix(batch.iter().map(|t| t.s.as_slice()), &p.obs_scale),
            a: actions(&|t| &t.a),
            prior: actions(&|t| &t.prior),
            prior_next: actions(&|t| &t.prior_next),
            w: batch.iter().map(|t| t.policy_weight()).collect(),
            r: batch.iter().map(|t| t.r).collect(),
            s_next: obs_matrix(batch.iter().map(|t| t.s_next.as_slice()), &p.obs_scale),
            terminal: batch.iter().map(|t| t.terminal).collect(),
        }
    }

    /// Mean squared Bellman residual against the target networks and its
    /// gradient with respect to the online critic.
    pub fn critic_objective(&self, batch: &[&Transition<T>], discount: T) -> (T, MlpGrads<T>) {
        let b = self.batch(batch);
        self.critic_objective_on(&b, discount)
    }

    fn critic_objective_on(&self, b: &Batch<T>, discount: T) -> (T, MlpGrads<T>) {
        let n = T::from_usize(b.r.len()).expect("batch size");
        let a_next = mix_columns(&self.policy.target.forward(&b.s_next), &b.prior_next, &b.w);
        let q_next = self.critic.target.forward(&stack(&b.s_next, &a_next));
        let scale = T::of(self.config.reward_scale);
        let cache = self.critic.net.forward_cached(&stack(&b.s, &b.a));
        let mut diff = cache.output().clone();
        for j in 0..b.r.len() {
            let boot = if b.terminal[j] { T::zero() } else { discount * q_next[(0, j)] };
            diff[(0, j)] -= scale * b.r[j] + boot;
        }
        let loss = diff.iter().fold(T::zero(), |acc, &d| acc + d * d) / n;
        let d_out = diff * (T::of(2.0) / n);
        let (grads, _) = self.critic.net.backward(&cache, &d_out);
        (loss, grads)
    }

    /// −mean Q(s, mix(ū(s), u_prior(s), λ)) plus the pre-activation penalty,
    /// and its gradient with respect to the actor, obtained by backpropagating
    /// through the critic and the mix.
    pub fn actor_objective(&self, batch: &[&Transition<T>]) -> (T, MlpGrads<T>) {
        let b = self.batch(batch);
        self.actor_objective_on(&b)
    }

    fn actor_objective_on(&self, b: &Batch<T>) -> (T, MlpGrads<T>) {
        let n = T::from_usize(b.r.len()).expect("batch size");
        let actor_cache = self.policy.actor.forward_cached(&b.s);
        let mixed = mix_columns(actor_cache.output(), &b.prior, &b.w);
        let critic_cache = self.critic.net.forward_cached(&stack(&b.s, &mixed));
        let loss = -critic_cache.output().sum() / n;
        let d_out = DMatrix::from_element(1, b.r.len(), -T::one() / n);
        let (_, d_in) = self.critic.net.backward(&critic_cache, &d_out);
        let obs_dim = b.s.nrows();
        let mut d_action = d_in.rows(obs_dim, d_in.nrows() - obs_dim).into_owned();
        for (j, mut col) in d_action.column_iter_mut().enumerate() {
            col *= b.w[j];
        }
        let pen = self.config.actor_preact_l2;
        let pre = self.policy.actor.pre_output(&actor_cache);
        let loss = loss + T::of(pen) * pre.iter().fold(T::zero(), |a, &y| a + y * y) / n;
        let d_pre = &pre * (T::of(2.0 * pen) / n);
        let (grads, _) = self.policy.actor.backward_with_pre(&actor_cache, &d_action, Some(&d_pre));
        (loss, grads)
    }

    /// One critic step, one actor step, then soft target updates.
    pub fn update(&mut self, batch: &[&Transition<T>], discount: T) -> Result<UpdateStats<T>, AgentError> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        let b = self.batch(batch);
        let (critic_loss, cg) = self.critic_objective_on(&b, discount);
        if !critic_loss.is_finite() {
            return Err(AgentError::NonFiniteLoss { which: "critic", value: critic_loss.to_f64_lossy() });
        }
        self.critic_opt.step(&mut self.critic.net, &cg, T::of(self.config.lr_critic));
        let (actor_loss, ag) = self.actor_objective_on(&b);
        if !actor_loss.is_finite() {
            return Err(AgentError::NonFiniteLoss { which: "actor", value: actor_loss.to_f64_lossy() });
        }
        self.policy.actor_opt_step(&mut self.actor_opt, &ag, T::of(self.config.lr_actor));
        let tau = T::of(self.config.soft_update);
        self.critic.target.soft_update_from(&self.critic.net, tau);
        let actor = self.policy.actor.clone();
        self.policy.target.soft_update_from(&actor, tau);
        Ok(UpdateStats { critic_loss, actor_loss })
    }

    pub fn checkpoint(&self, seed: u64, episode: usize) -> Checkpoint<T> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            seed,
            episode,
            actor_sizes: self.policy.actor.sizes(),
            critic_sizes: self.critic.net.sizes(),
            obs_scale: self.policy.obs_scale.clone(),
            bounds: self.policy.bounds.clone(),
            std: self.policy.std.clone(),
            actor: self.policy.actor.layers.clone(),
            critic: self.critic.net.layers.clone(),
        }
    }
}

impl<T: Scalar> GaussianPolicy<T> {
    fn actor_opt_step(&mut self, opt: &mut Adam<T>, grads: &MlpGrads<T>, lr: T) {
        opt.step(&mut self.actor, grads, lr);
    }
}

pub const CHECKPOINT_FORMAT: &str = "corerl-ddpg-v1";

/// Serialized actor and critic with enough header to rebuild an
/// evaluation-only policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T: Scalar> {
    pub format: String,
    pub seed: u64,
    pub episode: usize,
    pub actor_sizes: Vec<usize>,
    pub critic_sizes: Vec<usize>,
    pub obs_scale: Vec<T>,
    pub bounds: ActionBounds<T>,
    pub std: Vec<T>,
    pub actor: Vec<Layer<T>>,
    pub critic: Vec<Layer<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    fn check_layers(layers: &[Layer<T>], sizes: &[usize], what: &str) -> Result<(), AgentError> {
        let ok = layers.len() + 1 == sizes.len()
            && layers.iter().enumerate().all(|(i, l)| {
                l.w.ncols() == sizes[i] && l.w.nrows() == sizes[i + 1] && l.b.len() == sizes[i + 1]
            });
        if ok {
            Ok(())
        } else {
            Err(AgentError::Checkpoint(format!("{what} tensors do not match declared sizes {sizes:?}")))
        }
    }

    /// Rebuilds the actor (as both online and target network) for rollouts.
    pub fn policy(&self) -> Result<GaussianPolicy<T>, AgentError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(AgentError::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        Self::check_layers(&self.actor, &self.actor_sizes, "actor")?;
        Self::check_layers(&self.critic, &self.critic_sizes, "critic")?;
        let actor = Mlp { layers: self.actor.clone(), tanh_output: true };
        Ok(GaussianPolicy {
            target: actor.clone(),
            actor,
            obs_scale: self.obs_scale.clone(),
            bounds: self.bounds.clone(),
            std: self.std.clone(),
        })
    }

    pub fn critic(&self) -> Result<QCritic<T>, AgentError> {
        Self::check_layers(&self.critic, &self.critic_sizes, "critic")?;
        let net = Mlp { layers: self.critic.clone(), tanh_output: false };
        Ok(QCritic { target: net.clone(), net })
    }
}
