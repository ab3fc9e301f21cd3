use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::leader::{generate_leader_trace, LeaderTrace};
use super::{ActionBounds, Deviations, EnvError, Environment, StepResult, TraceRow};
use crate::rng::SimRng;
use crate::Scalar;

pub const N_CARS: usize = 5;
/// Index of the learner-controlled car, counted from the front of the chain.
pub const CONTROLLED_CAR: usize = 3;
const FRONT: usize = CONTROLLED_CAR - 1;
const BACK: usize = CONTROLLED_CAR + 1;
/// Gap used in the reward once cars touch.
pub const COLLISION_GAP_CLAMP: f64 = 1e-3;

const NEAR_GAP: f64 = 10.0;
const DANGER_GAP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CarFollowParams<T: Scalar> {
    pub dt: T,
    pub horizon: usize,
    pub accel_lo: T,
    pub accel_hi: T,
    /// Mixed into the per-episode trace seed.
    pub leader_profile_seed: u64,
}

impl<T: Scalar> Default for CarFollowParams<T> {
    fn default() -> Self {
        Self {
            dt: T::of(0.1),
            horizon: 100,
            accel_lo: T::of(-5.0),
            accel_hi: T::of(2.5),
            leader_profile_seed: 0,
        }
    }
}

impl<T: Scalar> CarFollowParams<T> {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.dt > T::zero() && self.dt.is_finite()) || self.horizon == 0 || !(self.accel_lo < self.accel_hi) {
            return Err(EnvError::InvalidParams(
                "car-following needs dt > 0, horizon ≥ 1 and accel_lo < accel_hi".into(),
            ));
        }
        Ok(())
    }

    pub fn trace(&self, seed: u64) -> LeaderTrace {
        generate_leader_trace(seed, self.horizon, self.dt.to_f64_lossy())
    }
}

/// Positions and velocities of all five cars, index 0 at the front.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CarFollowState<T: Scalar> {
    pub s: [T; N_CARS],
    pub v: [T; N_CARS],
    pub step: usize,
}

impl<T: Scalar> CarFollowState<T> {
    pub fn gap_front(&self) -> T {
        self.s[FRONT] - self.s[CONTROLLED_CAR]
    }

    pub fn gap_back(&self) -> T {
        self.s[CONTROLLED_CAR] - self.s[BACK]
    }

    /// (gap_front, gap_back, v_front, v_curr, v_back)
    pub fn observation(&self) -> Vec<T> {
        vec![
            self.gap_front(),
            self.gap_back(),
            self.v[FRONT],
            self.v[CONTROLLED_CAR],
            self.v[BACK],
        ]
    }

    fn from_row(row: &TraceRow) -> Self {
        Self {
            s: row.s.map(T::of),
            v: row.v.map(T::of),
            step: 0,
        }
    }
}

/// −v̇·min(0, a) − 100·|G1| − 50·G2 with gaps clamped at the collision clamp.
pub fn carfollow_reward<T: Scalar>(state: &CarFollowState<T>, accel: T, v_dot: T) -> T {
    let clamp = T::of(COLLISION_GAP_CLAMP);
    let front = state.gap_front().max(clamp);
    let back = state.gap_back().max(clamp);
    let near = T::of(NEAR_GAP);
    let g1 = if front <= near {
        T::one() / front
    } else if back <= near {
        T::one() / back
    } else {
        T::zero()
    };
    let danger = T::of(DANGER_GAP);
    let g2 = if front <= danger || back <= danger { T::one() } else { T::zero() };
    -v_dot * accel.min(T::zero()) - T::of(100.0) * g1.abs() - T::of(50.0) * g2
}

/// Advances the controlled car under constant acceleration for one step
/// (stopping at zero velocity) and moves the other cars to the next trace row.
///
/// The reward's v̇ is the realized acceleration, which differs from the
/// command when the velocity floor binds.
pub fn carfollow_step<T: Scalar>(
    state: &CarFollowState<T>,
    accel: T,
    params: &CarFollowParams<T>,
    trace: &LeaderTrace,
) -> Result<StepResult<CarFollowState<T>, T>, EnvError> {
    let a = crate::clamp(accel, params.accel_lo, params.accel_hi);
    let dt = params.dt;
    let k = state.step + 1;
    let row = trace
        .rows
        .get(k)
        .ok_or_else(|| EnvError::Trace(format!("trace has no row {k}")))?;

    let (s0, v0) = (state.s[CONTROLLED_CAR], state.v[CONTROLLED_CAR]);
    let v_free = v0 + a * dt;
    let (s1, v1) = if v_free >= T::zero() {
        (s0 + v0 * dt + T::of(0.5) * a * dt * dt, v_free)
    } else {
        // stops within the step: distance v0²/(2|a|)
        (s0 + v0 * v0 / (T::of(-2.0) * a), T::zero())
    };

    let mut next = CarFollowState::from_row(row);
    next.step = k;
    next.s[CONTROLLED_CAR] = s1;
    next.v[CONTROLLED_CAR] = v1;
    if next.s.iter().chain(&next.v).any(|x| !x.is_finite()) {
        return Err(EnvError::NonFiniteState(format!("{next:?}")));
    }
    let v_dot = (v1 - v0) / dt;
    let collided = next.gap_front() <= T::zero() || next.gap_back() <= T::zero();
    Ok(StepResult {
        reward: carfollow_reward(&next, a, v_dot),
        next_state: next,
        done: collided || k >= params.horizon,
        guard: collided,
        terminal: collided,
    })
}

/// Five-car chain with the learner driving car [`CONTROLLED_CAR`].
///
/// Each reset draws a fresh synthetic trace unless one was pinned with
/// [`CarFollowEnv::with_trace`].
#[derive(Debug, Clone)]
pub struct CarFollowEnv<T: Scalar> {
    pub params: CarFollowParams<T>,
    bounds: ActionBounds<T>,
    fixed_trace: Option<Arc<LeaderTrace>>,
    trace: Arc<LeaderTrace>,
    state: CarFollowState<T>,
}

impl<T: Scalar> CarFollowEnv<T> {
    pub fn new(params: CarFollowParams<T>) -> Result<Self, EnvError> {
        params.validate()?;
        let trace = Arc::new(params.trace(params.leader_profile_seed));
        let state = CarFollowState::from_row(&trace.rows[0]);
        Ok(Self {
            bounds: ActionBounds {
                lo: vec![params.accel_lo],
                hi: vec![params.accel_hi],
            },
            params,
            fixed_trace: None,
            trace,
            state,
        })
    }

    /// Replays `trace` on every episode.
    pub fn with_trace(params: CarFollowParams<T>, trace: LeaderTrace) -> Result<Self, EnvError> {
        if trace.steps() < params.horizon {
            return Err(EnvError::Trace(format!(
                "trace has {} steps, horizon is {}",
                trace.steps(),
                params.horizon
            )));
        }
        if (trace.dt - params.dt.to_f64_lossy()).abs() > 1e-9 {
            return Err(EnvError::Trace(format!("trace dt {} differs from env dt", trace.dt)));
        }
        let mut env = Self::new(params)?;
        let trace = Arc::new(trace);
        env.state = CarFollowState::from_row(&trace.rows[0]);
        env.fixed_trace = Some(trace.clone());
        env.trace = trace;
        Ok(env)
    }

    pub fn state(&self) -> &CarFollowState<T> {
        &self.state
    }

    pub fn trace(&self) -> &LeaderTrace {
        &self.trace
    }
}

impl<T: Scalar> Environment<T> for CarFollowEnv<T> {
    fn name(&self) -> &'static str {
        "carfollow"
    }

    fn observation_dim(&self) -> usize {
        5
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> &ActionBounds<T> {
        &self.bounds
    }

    fn observation_scale(&self) -> Vec<T> {
        [0.1, 0.1, 0.05, 0.05, 0.05].map(T::of).to_vec()
    }

    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<T> {
        self.trace = match &self.fixed_trace {
            Some(t) => t.clone(),
            None => {
                let seed = self.params.leader_profile_seed.wrapping_add(rng.gen::<u64>());
                Arc::new(self.params.trace(seed))
            }
        };
        self.state = CarFollowState::from_row(&self.trace.rows[0]);
        self.state.observation()
    }

    fn observation(&self) -> Vec<T> {
        self.state.observation()
    }

    fn step(&mut self, action: &[T]) -> Result<StepResult<Vec<T>, T>, EnvError> {
        if action.len() != 1 {
            return Err(EnvError::DimensionMismatch { expected: 1, got: action.len() });
        }
        let r = carfollow_step(&self.state, action[0], &self.params, &self.trace)?;
        self.state = r.next_state;
        Ok(StepResult {
            next_state: self.state.observation(),
            reward: r.reward,
            done: r.done,
            guard: r.guard,
            terminal: r.terminal,
        })
    }

    fn deviations(&self) -> Deviations<T> {
        Deviations {
            primary: (self.state.gap_front() - self.state.gap_back()).abs(),
            secondary: (self.state.v[FRONT] - self.state.v[CONTROLLED_CAR]).abs(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn uniform_trace(gap: f64, v: f64, steps: usize, dt: f64) -> LeaderTrace {
        let rows = (0..=steps)
            .map(|k| {
                let t = k as f64 * dt;
                let mut s = [0.0; N_CARS];
                for (i, si) in s.iter_mut().enumerate() {
                    *si = -(i as f64) * gap + v * t;
                }
                TraceRow { t, s, v: [v; N_CARS] }
            })
            .collect();
        LeaderTrace { dt, rows }
    }

    fn state_with_gaps(front: f64, back: f64) -> CarFollowState<f64> {
        let s = [front + 40.0, front + 20.0, front, 0.0, -back];
        CarFollowState { s, v: [10.0; N_CARS], step: 0 }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(carfollow_reward(&state_with_gaps(15.0, 15.0), 0.0, 0.0), 0.0);
        assert!((carfollow_reward(&state_with_gaps(5.0, 20.0), 0.0, 0.0) + 20.0).abs() < 1e-12);
        let r = carfollow_reward(&state_with_gaps(1.5, 20.0), 0.0, 0.0);
        assert!((r - (-100.0 / 1.5 - 50.0)).abs() < 1e-12);
        // braking costs fuel: −v̇·min(0,a) with v̇ = a = −2
        assert!((carfollow_reward(&state_with_gaps(15.0, 15.0), -2.0, -2.0) + 4.0).abs() < 1e-12);
    }

    #[test]
    fn collision_gap_is_clamped() {
        let r = carfollow_reward(&state_with_gaps(-1.0, 20.0), 0.0, 0.0);
        assert!((r - (-100.0 / COLLISION_GAP_CLAMP - 50.0)).abs() < 1e-9);
    }

    #[test]
    fn uniform_motion_keeps_gaps() {
        let params = CarFollowParams::<f64>::default();
        let trace = uniform_trace(12.0, 10.0, 100, 0.1);
        let mut env = CarFollowEnv::with_trace(params, trace).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        env.reset(&mut rng);
        for k in 0..100 {
            let r = env.step(&[0.0]).unwrap();
            assert!((env.state().gap_front() - 12.0).abs() < 1e-9);
            assert!((env.state().gap_back() - 12.0).abs() < 1e-9);
            assert_eq!(r.done, k == 99);
            assert!(!r.terminal);
        }
    }

    #[test]
    fn velocity_floor() {
        let params = CarFollowParams::<f64>::default();
        let trace = uniform_trace(12.0, 0.3, 2, 0.1);
        let mut st = CarFollowState::<f64>::from_row(&trace.rows[0]);
        st.v[CONTROLLED_CAR] = 0.3;
        let r = carfollow_step(&st, -5.0, &params, &trace).unwrap();
        assert_eq!(r.next_state.v[CONTROLLED_CAR], 0.0);
        // stopping distance 0.3²/10
        assert!((r.next_state.s[CONTROLLED_CAR] - st.s[CONTROLLED_CAR] - 0.009).abs() < 1e-12);
    }

    /// Closed-form constant-acceleration kinematics stepped independently.
    #[test]
    fn matches_kinematic_oracle() {
        let params = CarFollowParams::<f64>::default();
        let trace = params.trace(11);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut st = CarFollowState::<f64>::from_row(&trace.rows[0]);
        let (mut s, mut v) = (st.s[CONTROLLED_CAR], st.v[CONTROLLED_CAR]);
        for _ in 0..100 {
            let cmd: f64 = rng.gen_range(-7.0..4.0);
            let a = cmd.clamp(-5.0, 2.5);
            let t_stop = if a < 0.0 { v / -a } else { f64::INFINITY };
            let t = t_stop.min(0.1);
            s += v * t + 0.5 * a * t * t;
            v = (v + a * t).max(0.0);
            let r = carfollow_step(&st, cmd, &params, &trace).unwrap();
            st = r.next_state;
            assert!((st.s[CONTROLLED_CAR] - s).abs() < 1e-12);
            assert!((st.v[CONTROLLED_CAR] - v).abs() < 1e-12);
            if r.done {
                break;
            }
        }
    }

    #[test]
    fn collision_ends_episode() {
        let params = CarFollowParams::<f64>::default();
        let trace = uniform_trace(0.5, 10.0, 10, 0.1);
        let mut st = CarFollowState::<f64>::from_row(&trace.rows[0]);
        st.v[CONTROLLED_CAR] = 20.0;
        let r = carfollow_step(&st, 2.5, &params, &trace).unwrap();
        assert!(r.done && r.terminal);
        assert!(r.reward.is_finite());
    }

    #[test]
    fn random_traces_differ_across_resets() {
        let mut env = CarFollowEnv::<f64>::new(CarFollowParams::default()).unwrap();
        let mut rng = SimRng::seed_from_u64(1);
        let a = env.reset(&mut rng);
        let b = env.reset(&mut rng);
        assert_ne!(a, b);
    }
}
