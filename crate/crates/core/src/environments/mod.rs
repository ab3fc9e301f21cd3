//! Simulated tasks: continuous-force cartpole and a five-car car-following
//! chain, plus the linearization of the cartpole's known model.

mod carfollow;
mod cartpole;
mod leader;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;
use crate::Scalar;

pub use carfollow::{
    carfollow_reward, carfollow_step, CarFollowEnv, CarFollowParams, CarFollowState, COLLISION_GAP_CLAMP,
    CONTROLLED_CAR,
};
pub use cartpole::{
    cartpole_derivative, cartpole_reward, cartpole_step, linearize_known_model, CartPoleEnv, CartPoleParams,
    CartPoleState, PRIOR_MODEL_PERTURBATION,
};
pub use leader::{generate_leader_trace, LeaderTrace, TraceRow};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("simulation produced a non-finite state: {0}")]
    NonFiniteState(String),
    #[error("action has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid environment parameters: {0}")]
    InvalidParams(String),
    #[error("leader trace error: {0}")]
    Trace(String),
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<S, T> {
    pub next_state: S,
    pub reward: T,
    /// Episode over: horizon reached or a divergence/collision guard tripped.
    pub done: bool,
    /// A divergence or collision guard tripped.
    pub guard: bool,
    /// Absorbing: the value past this transition is zero and is not bootstrapped.
    pub terminal: bool,
}

/// Box bounds on the action vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ActionBounds<T: Scalar> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Scalar> ActionBounds<T> {
    pub fn symmetric(limit: T, dim: usize) -> Self {
        Self {
            lo: vec![-limit; dim],
            hi: vec![limit; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clip(&self, action: &mut [T]) {
        for ((a, &lo), &hi) in action.iter_mut().zip(&self.lo).zip(&self.hi) {
            *a = crate::clamp(*a, lo, hi);
        }
    }

    pub fn contains(&self, action: &[T]) -> bool {
        action.len() == self.dim()
            && action
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&a, (&lo, &hi))| a >= lo && a <= hi)
    }

    pub fn center(&self) -> Vec<T> {
        self.lo.iter().zip(&self.hi).map(|(&l, &h)| (l + h) * T::of(0.5)).collect()
    }

    pub fn half_range(&self) -> Vec<T> {
        self.lo.iter().zip(&self.hi).map(|(&l, &h)| (h - l) * T::of(0.5)).collect()
    }

    /// Euclidean norm of the per-dimension width (hi − lo).
    pub fn range_norm(&self) -> T {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| (h - l) * (h - l))
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    /// Largest Euclidean norm of any admissible action.
    pub fn max_norm(&self) -> T {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| {
                let m = l.abs().max(h.abs());
                m * m
            })
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }
}

/// Two task-specific deviation measures tracked per episode.
///
/// Cartpole: (|θ|, |x|). Car following: (|front gap − back gap|, |v_front − v_curr|).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviations<T> {
    pub primary: T,
    pub secondary: T,
}

/// Episodic task driven by the training loop.
pub trait Environment<T: Scalar>: Send {
    fn name(&self) -> &'static str;
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> &ActionBounds<T>;
    /// Fixed per-feature scaling applied to observations before they reach a network.
    fn observation_scale(&self) -> Vec<T>;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut SimRng) -> Vec<T>;
    fn observation(&self) -> Vec<T>;
    fn step(&mut self, action: &[T]) -> Result<StepResult<Vec<T>, T>, EnvError>;
    fn deviations(&self) -> Deviations<T>;
}

/// One-step simulator usable from an arbitrary state, as needed for
/// finite-difference estimates of the continuous-time vector field.
pub trait Simulator<T: Scalar> {
    fn state_dim(&self) -> usize;
    fn dt(&self) -> T;
    fn advance(&self, state: &[T], action: &[T]) -> Result<Vec<T>, EnvError>;
}
