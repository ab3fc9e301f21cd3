use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionBounds, Deviations, EnvError, Environment, Simulator, StepResult};
use crate::robust_control::LinearPlant;
use crate::rng::SimRng;
use crate::Scalar;

/// Factor applied to pole mass and half-length when building the model used
/// for prior synthesis (≈60% modelling error).
pub const PRIOR_MODEL_PERTURBATION: f64 = 1.6;

const X_LIMIT: f64 = 10.0;
const RESET_SPREAD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CartPoleParams<T: Scalar> {
    pub cart_mass: T,
    pub pole_mass: T,
    /// Half the pole length.
    pub half_length: T,
    pub gravity: T,
    pub tau: T,
    pub force_limit: T,
}

impl<T: Scalar> Default for CartPoleParams<T> {
    fn default() -> Self {
        Self {
            cart_mass: T::of(1.0),
            pole_mass: T::of(0.1),
            half_length: T::of(0.5),
            gravity: T::of(9.8),
            tau: T::of(0.02),
            force_limit: T::of(10.0),
        }
    }
}

impl<T: Scalar> CartPoleParams<T> {
    pub fn validate(&self) -> Result<(), EnvError> {
        let all = [
            self.cart_mass,
            self.pole_mass,
            self.half_length,
            self.gravity,
            self.tau,
            self.force_limit,
        ];
        if all.iter().all(|&v| v > T::zero() && v.is_finite()) {
            Ok(())
        } else {
            Err(EnvError::InvalidParams("cartpole parameters must be positive and finite".into()))
        }
    }

    /// Copy with pole mass and half-length scaled by `factor`.
    pub fn perturbed(&self, factor: T) -> Self {
        Self {
            pole_mass: self.pole_mass * factor,
            half_length: self.half_length * factor,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CartPoleState<T: Scalar> {
    pub x: T,
    pub x_dot: T,
    pub theta: T,
    pub theta_dot: T,
}

impl<T: Scalar> CartPoleState<T> {
    pub fn new(x: T, x_dot: T, theta: T, theta_dot: T) -> Self {
        Self { x, x_dot, theta, theta_dot }
    }

    pub fn from_slice(s: &[T]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn to_vec(&self) -> Vec<T> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.x_dot.is_finite() && self.theta.is_finite() && self.theta_dot.is_finite()
    }
}

/// Right-hand side of the cartpole ODE: (ẋ, ẍ, θ̇, θ̈).
///
/// θ is measured from upright; a positive force pushes the cart toward +x.
pub fn cartpole_derivative<T: Scalar>(s: &CartPoleState<T>, force: T, p: &CartPoleParams<T>) -> [T; 4] {
    let total_mass = p.cart_mass + p.pole_mass;
    let pml = p.pole_mass * p.half_length;
    let (sin, cos) = (s.theta.sin(), s.theta.cos());
    let temp = (force + pml * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc = (p.gravity * sin - cos * temp)
        / (p.half_length * (T::of(4.0 / 3.0) - p.pole_mass * cos * cos / total_mass));
    let x_acc = temp - pml * theta_acc * cos / total_mass;
    [s.x_dot, x_acc, s.theta_dot, theta_acc]
}

/// −100|θ| − 2x².
pub fn cartpole_reward<T: Scalar>(s: &CartPoleState<T>) -> T {
    -T::of(100.0) * s.theta.abs() - T::of(2.0) * s.x * s.x
}

/// One semi-implicit Euler step of length `tau` with the force clipped to
/// `[-force_limit, force_limit]`.
///
/// `done` reports the divergence guard (|x| > 10 or |θ| > π/2); the episode
/// horizon is tracked by [`CartPoleEnv`].
pub fn cartpole_step<T: Scalar>(
    state: &CartPoleState<T>,
    force: T,
    params: &CartPoleParams<T>,
) -> Result<StepResult<CartPoleState<T>, T>, EnvError> {
    let force = crate::clamp(force, -params.force_limit, params.force_limit);
    let [_, x_acc, _, theta_acc] = cartpole_derivative(state, force, params);
    let tau = params.tau;
    let x_dot = state.x_dot + tau * x_acc;
    let theta_dot = state.theta_dot + tau * theta_acc;
    let next = CartPoleState {
        x: state.x + tau * x_dot,
        x_dot,
        theta: wrap_angle(state.theta + tau * theta_dot),
        theta_dot,
    };
    if !next.is_finite() {
        return Err(EnvError::NonFiniteState(format!("{next:?}")));
    }
    let diverged = next.x.abs() > T::of(X_LIMIT) || next.theta.abs() > T::frac_pi_2();
    Ok(StepResult {
        reward: cartpole_reward(&next),
        next_state: next,
        done: diverged,
        guard: diverged,
        // The guard truncates a continuing task; the value past it is still bootstrapped.
        terminal: false,
    })
}

fn wrap_angle<T: Scalar>(theta: T) -> T {
    let two_pi = T::two_pi();
    if theta > T::pi() || theta <= -T::pi() {
        let shifted = theta + T::pi();
        shifted - two_pi * (shifted / two_pi).floor() - T::pi()
    } else {
        theta
    }
}

/// Linearization of the cartpole about the upright equilibrium, state order
/// (x, ẋ, θ, θ̇).
///
/// B1 injects force-like disturbances into ẍ and θ̈; C1 = diag(1, 0.1, 3, 0.3)
/// weights angle errors above position errors.
pub fn linearize_known_model<T: Scalar>(params: &CartPoleParams<T>) -> LinearPlant<T> {
    let CartPoleParams {
        cart_mass: big_m,
        pole_mass: m,
        half_length: l,
        gravity: g,
        ..
    } = *params;
    let denom = T::of(4.0) * big_m + m;
    let three = T::of(3.0);
    let zero = T::zero();
    let one = T::one();
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        zero, one, zero, zero,
        zero, zero, -three * m * g / denom, zero,
        zero, zero, zero, one,
        zero, zero, three * (big_m + m) * g / (l * denom), zero,
    ]);
    let b2 = DMatrix::from_row_slice(4, 1, &[zero, T::of(4.0) / denom, zero, -three / (l * denom)]);
    #[rustfmt::skip]
    let b1 = DMatrix::from_row_slice(4, 2, &[
        zero, zero,
        one, zero,
        zero, zero,
        zero, one,
    ]);
    let c1 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
        one,
        T::of(0.1),
        T::of(3.0),
        T::of(0.3),
    ]));
    LinearPlant::new(a, b1, b2, c1).expect("cartpole linearization has consistent shapes")
}

impl<T: Scalar> Simulator<T> for CartPoleParams<T> {
    fn state_dim(&self) -> usize {
        4
    }

    fn dt(&self) -> T {
        self.tau
    }

    fn advance(&self, state: &[T], action: &[T]) -> Result<Vec<T>, EnvError> {
        if action.len() != 1 {
            return Err(EnvError::DimensionMismatch { expected: 1, got: action.len() });
        }
        let next = cartpole_step(&CartPoleState::from_slice(state), action[0], self)?.next_state;
        // undo wrapping so finite differences stay continuous
        let mut v = next.to_vec();
        v[2] = state[2] + self.tau * next.theta_dot;
        Ok(v)
    }
}

/// Episodic cartpole: uniform ±0.05 initial state, fixed horizon.
#[derive(Debug, Clone)]
pub struct CartPoleEnv<T: Scalar> {
    pub params: CartPoleParams<T>,
    bounds: ActionBounds<T>,
    horizon: usize,
    state: CartPoleState<T>,
    t: usize,
}

impl<T: Scalar> CartPoleEnv<T> {
    pub fn new(params: CartPoleParams<T>, horizon: usize) -> Result<Self, EnvError> {
        params.validate()?;
        if horizon == 0 {
            return Err(EnvError::InvalidParams("horizon must be at least 1".into()));
        }
        Ok(Self {
            bounds: ActionBounds::symmetric(params.force_limit, 1),
            params,
            horizon,
            state: CartPoleState::default(),
            t: 0,
        })
    }

    pub fn state(&self) -> CartPoleState<T> {
        self.state
    }

    /// Starts an episode from a given state instead of a random one.
    pub fn reset_to(&mut self, state: CartPoleState<T>) -> Vec<T> {
        self.state = state;
        self.t = 0;
        state.to_vec()
    }
}

impl<T: Scalar> Environment<T> for CartPoleEnv<T> {
    fn name(&self) -> &'static str {
        "cartpole"
    }

    fn observation_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> &ActionBounds<T> {
        &self.bounds
    }

    fn observation_scale(&self) -> Vec<T> {
        vec![T::one(); 4]
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<T> {
        let mut draw = || T::of(rng.gen_range(-RESET_SPREAD..RESET_SPREAD));
        let state = CartPoleState::new(draw(), draw(), draw(), draw());
        self.reset_to(state)
    }

    fn observation(&self) -> Vec<T> {
        self.state.to_vec()
    }

    fn step(&mut self, action: &[T]) -> Result<StepResult<Vec<T>, T>, EnvError> {
        if action.len() != 1 {
            return Err(EnvError::DimensionMismatch { expected: 1, got: action.len() });
        }
        let res = cartpole_step(&self.state, action[0], &self.params)?;
        self.state = res.next_state;
        self.t += 1;
        Ok(StepResult {
            next_state: self.state.to_vec(),
            reward: res.reward,
            done: res.done || self.t >= self.horizon,
            guard: res.guard,
            terminal: res.terminal,
        })
    }

    fn deviations(&self) -> Deviations<T> {
        Deviations {
            primary: self.state.theta.abs(),
            secondary: self.state.x.abs(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robust_control::is_hurwitz;

    fn params() -> CartPoleParams<f64> {
        CartPoleParams::default()
    }

    #[test]
    fn equilibrium_is_fixed() {
        let s = CartPoleState::default();
        let r = cartpole_step(&s, 0.0, &params()).unwrap();
        assert_eq!(r.next_state, s);
        assert_eq!(r.reward, 0.0);
        assert!(!r.done);
    }

    #[test]
    fn force_is_clipped() {
        let s = CartPoleState::default();
        let a = cartpole_step(&s, 100.0, &params()).unwrap();
        let b = cartpole_step(&s, 10.0, &params()).unwrap();
        assert_eq!(a.next_state, b.next_state);
        assert!(b.next_state.x_dot > 0.0);
        // pushing the cart right tips the pole left
        assert!(b.next_state.theta_dot < 0.0);
    }

    /// Independent classical RK4 on the same ODE; agreement is O(tau²) per
    /// step for semi-implicit Euler.
    #[test]
    fn agrees_with_rk4_oracle() {
        let p = params();
        let rk4 = |s: [f64; 4], f: f64| {
            let d = |s: [f64; 4]| cartpole_derivative(&CartPoleState::new(s[0], s[1], s[2], s[3]), f, &p);
            let add = |a: [f64; 4], b: [f64; 4], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2], a[3] + h * b[3]];
            let k1 = d(s);
            let k2 = d(add(s, k1, p.tau / 2.0));
            let k3 = d(add(s, k2, p.tau / 2.0));
            let k4 = d(add(s, k3, p.tau));
            let mut out = s;
            for i in 0..4 {
                out[i] += p.tau / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            out
        };
        let s0 = CartPoleState::default();
        let ours = cartpole_step(&s0, 10.0, &p).unwrap().next_state.to_vec();
        let oracle = rk4([0.0; 4], 10.0);
        for i in 0..4 {
            assert!((ours[i] - oracle[i]).abs() < 5.0 * p.tau * p.tau * 10.0, "component {i}");
            // signs agree
            assert!(ours[i] * oracle[i] >= 0.0);
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(cartpole_reward(&CartPoleState::new(0.0, 0.0, 0.0, 0.0)), 0.0);
        assert!((cartpole_reward(&CartPoleState::<f64>::new(1.0, 0.0, 0.1, 0.0)) + 12.0).abs() < 1e-12);
        assert!((cartpole_reward(&CartPoleState::<f64>::new(-1.0, 0.0, -0.1, 0.0)) + 12.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_guard() {
        let s = CartPoleState::new(0.0, 0.0, 1.56, 5.0);
        let r = cartpole_step(&s, 0.0, &params()).unwrap();
        assert!(r.done && r.guard && !r.terminal);
        let s = CartPoleState::new(9.99, 5.0, 0.0, 0.0);
        assert!(cartpole_step(&s, 0.0, &params()).unwrap().done);
    }

    #[test]
    fn non_finite_state_is_an_error() {
        let s = CartPoleState::new(0.0, f64::NAN, 0.0, 0.0);
        assert!(matches!(cartpole_step(&s, 0.0, &params()), Err(EnvError::NonFiniteState(_))));
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI / 2.0) + std::f64::consts::PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn upright_linearization_is_unstable() {
        let plant = linearize_known_model(&params());
        assert!(plant.a[(3, 2)] > 0.0);
        assert!(!is_hurwitz(&plant.a));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let p = params();
        let plant = linearize_known_model(&p);
        let h = 1e-6;
        let f = |s: [f64; 4], u: f64| cartpole_derivative(&CartPoleState::new(s[0], s[1], s[2], s[3]), u, &p);
        for j in 0..4 {
            let mut sp = [0.0; 4];
            let mut sm = [0.0; 4];
            sp[j] = h;
            sm[j] = -h;
            let (fp, fm) = (f(sp, 0.0), f(sm, 0.0));
            for i in 0..4 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((fd - plant.a[(i, j)]).abs() < 1e-6, "A[{i},{j}]: fd {fd} vs {}", plant.a[(i, j)]);
            }
        }
        let (fp, fm) = (f([0.0; 4], h), f([0.0; 4], -h));
        for i in 0..4 {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            assert!((fd - plant.b2[(i, 0)]).abs() < 1e-6);
        }
    }

    #[test]
    fn input_jacobian_scales_inversely_with_cart_mass() {
        let mut prev = f64::INFINITY;
        for big_m in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let p = CartPoleParams { cart_mass: big_m, ..params() };
            let b2 = linearize_known_model(&p).b2;
            // (4M + m)·B2 is independent of M
            assert!((b2[(1, 0)] * (4.0 * big_m + p.pole_mass) - 4.0).abs() < 1e-12);
            assert!(b2[(1, 0)] < prev);
            prev = b2[(1, 0)];
        }
    }

    /// Total mechanical energy of the rod-on-cart model.
    fn energy(s: &CartPoleState<f64>, p: &CartPoleParams<f64>) -> f64 {
        let (m, big_m, l) = (p.pole_mass, p.cart_mass, p.half_length);
        0.5 * (big_m + m) * s.x_dot * s.x_dot
            + m * l * s.x_dot * s.theta_dot * s.theta.cos()
            + (2.0 / 3.0) * m * l * l * s.theta_dot * s.theta_dot
            + m * p.gravity * l * s.theta.cos()
    }

    /// Largest relative energy error along an unforced fall, split into
    /// the |θ| ≤ 0.5 portion and the whole episode.
    fn unforced_drift(tau: f64) -> (f64, f64) {
        let p = CartPoleParams { tau, ..params() };
        let mut env = CartPoleEnv::new(p, 100_000).unwrap();
        env.reset_to(CartPoleState::new(0.0, 0.0, 0.1, 0.0));
        let e0 = energy(&env.state(), &p);
        let (mut near, mut all) = (0.0f64, 0.0f64);
        loop {
            let r = env.step(&[0.0]).unwrap();
            let drift = (energy(&env.state(), &p) - e0).abs() / e0.abs();
            all = all.max(drift);
            if env.state().theta.abs() <= 0.5 {
                near = near.max(drift);
            }
            if r.done {
                return (near, all);
            }
        }
    }

    #[test]
    fn energy_drift_is_small_near_upright() {
        let (near, _) = unforced_drift(0.02);
        assert!(near < 0.01, "drift {near}");
    }

    #[test]
    fn energy_drift_is_first_order_in_tau() {
        let (_, coarse) = unforced_drift(0.02);
        let (_, fine) = unforced_drift(0.01);
        let ratio = coarse / fine;
        assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn env_is_deterministic() {
        use crate::rng::{child_rng, StreamLabel};
        let run = || {
            let mut env = CartPoleEnv::new(params(), 50).unwrap();
            let mut rng = child_rng(3, StreamLabel::Environment);
            let mut out = env.reset(&mut rng);
            for k in 0..50 {
                let r = env.step(&[((k as f64) * 0.7).sin() * 5.0]).unwrap();
                out.extend(r.next_state);
                if r.done {
                    break;
                }
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn horizon_ends_episode() {
        let mut env = CartPoleEnv::new(params(), 3).unwrap();
        env.reset_to(CartPoleState::default());
        assert!(!env.step(&[0.0]).unwrap().done);
        assert!(!env.step(&[0.0]).unwrap().done);
        let last = env.step(&[0.0]).unwrap();
        assert!(last.done && !last.guard && !last.terminal);
    }
}
