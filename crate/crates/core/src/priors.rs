//! Fixed controllers mixed with the learned policy: linear state feedback
//! from H∞ synthesis (cartpole) and a three-level bang-bang rule
//! (car following).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environments::{
    cartpole_step, linearize_known_model, ActionBounds, CarFollowParams, CartPoleParams, CartPoleState,
    PRIOR_MODEL_PERTURBATION,
};
use crate::robust_control::{solve_care, synthesize_hinf, ControlError, HInfController, LinearPlant};
use crate::Scalar;

/// Attenuation bracket searched when synthesizing the cartpole prior.
pub const CARTPOLE_GAMMA_BRACKET: (f64, f64) = (0.1, 1e4);
/// The prior is built at this multiple of the smallest feasible attenuation
/// level; right at the optimum the Riccati solution blows up and the gains
/// saturate the actuator.
pub const DEFAULT_GAMMA_BACKOFF: f64 = 1.2;

const GRID_THETA: f64 = 0.2;
const GRID_X: f64 = 1.0;
const GRID_STEPS: usize = 500;
const GRID_SETTLED_THETA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PriorError {
    #[error("state has dimension {got}, prior expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("H∞ synthesis failed: {0}")]
    SynthesisFailed(#[from] ControlError),
    #[error("prior does not stabilize the simulator: {0}")]
    NotStabilizing(String),
}

impl PriorError {
    pub fn code(&self) -> &'static str {
        match self {
            PriorError::DimensionMismatch { .. } => "DimensionMismatch",
            PriorError::SynthesisFailed(_) => "SynthesisFailed",
            PriorError::NotStabilizing(_) => "NotStabilizing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", bound = "T: Scalar")]
pub enum PriorKind<T: Scalar> {
    /// u = −K (s − setpoint); `k` has one row per action dimension.
    LinearStateFeedback { k: Vec<Vec<T>>, setpoint: Vec<T> },
    /// Car-following rule on (gap_front, gap_back, v_front, v_curr, v_back):
    /// accel_hi if Kp·Δs + Kd·Δv > 0, accel_lo if < 0, else 0.
    BangBang { kp: T, kd: T, accel_hi: T, accel_lo: T },
}

/// Deterministic controller u_prior(s) with the action box it must respect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ControlPrior<T: Scalar> {
    #[serde(flatten)]
    pub kind: PriorKind<T>,
    pub bounds: ActionBounds<T>,
}

impl<T: Scalar> ControlPrior<T> {
    pub fn linear(k: &DMatrix<T>, setpoint: Vec<T>, bounds: ActionBounds<T>) -> Self {
        let rows = (0..k.nrows()).map(|i| k.row(i).iter().copied().collect()).collect();
        Self {
            kind: PriorKind::LinearStateFeedback { k: rows, setpoint },
            bounds,
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            PriorKind::LinearStateFeedback { setpoint, .. } => setpoint.len(),
            PriorKind::BangBang { .. } => 5,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn evaluate(&self, state: &[T]) -> Result<Vec<T>, PriorError> {
        evaluate_prior(self, state)
    }
}

pub fn evaluate_prior<T: Scalar>(prior: &ControlPrior<T>, state: &[T]) -> Result<Vec<T>, PriorError> {
    let expected = prior.state_dim();
    if state.len() != expected {
        return Err(PriorError::DimensionMismatch { expected, got: state.len() });
    }
    let mut action = match &prior.kind {
        PriorKind::LinearStateFeedback { k, setpoint } => k
            .iter()
            .map(|row| {
                -row.iter()
                    .zip(state.iter().zip(setpoint))
                    .fold(T::zero(), |acc, (&kij, (&s, &s0))| acc + kij * (s - s0))
            })
            .collect(),
        PriorKind::BangBang { kp, kd, accel_hi, accel_lo } => {
            let (gap_f, gap_b, v_f, v_c, v_b) = (state[0], state[1], state[2], state[3], state[4]);
            let ds = gap_f - gap_b;
            let dv = v_f - T::of(2.0) * v_c + v_b;
            let drive = *kp * ds + *kd * dv;
            let a = if drive > T::zero() {
                *accel_hi
            } else if drive < T::zero() {
                *accel_lo
            } else {
                T::zero()
            };
            vec![a]
        }
    };
    prior.bounds.clip(&mut action);
    Ok(action)
}

/// Everything produced while building the cartpole prior.
#[derive(Debug, Clone)]
pub struct CartPoleDesign<T: Scalar> {
    pub prior: ControlPrior<T>,
    /// Linearized perturbed model the controller was synthesized on.
    pub plant: LinearPlant<T>,
    pub controller: HInfController<T>,
    /// Smallest feasible attenuation level found by bisection.
    pub zeta_min: T,
}

/// H∞ prior from the cartpole model with pole mass and length scaled by
/// [`PRIOR_MODEL_PERTURBATION`], checked on the true simulator.
pub fn build_cartpole_prior<T: Scalar>(true_params: &CartPoleParams<T>) -> Result<ControlPrior<T>, PriorError> {
    Ok(design_cartpole_prior(true_params, T::of(PRIOR_MODEL_PERTURBATION), T::of(DEFAULT_GAMMA_BACKOFF))?.prior)
}

/// Synthesizes on the model perturbed by `perturbation`, solves the Riccati
/// equation at `backoff · ζ_min` and verifies the resulting prior settles the
/// true cartpole from a 5×5 grid of initial (θ, x) with |θ| ≤ 0.2, |x| ≤ 1.
pub fn design_cartpole_prior<T: Scalar>(
    true_params: &CartPoleParams<T>,
    perturbation: T,
    backoff: T,
) -> Result<CartPoleDesign<T>, PriorError> {
    if !(backoff >= T::one()) {
        return Err(PriorError::SynthesisFailed(ControlError::InvalidInput(format!(
            "gamma backoff must be ≥ 1, got {backoff}"
        ))));
    }
    let plant = linearize_known_model(&true_params.perturbed(perturbation));
    let bracket = (T::of(CARTPOLE_GAMMA_BRACKET.0), T::of(CARTPOLE_GAMMA_BRACKET.1));
    let optimal = synthesize_hinf(&plant, bracket, T::of(crate::robust_control::DEFAULT_BISECTION_TOL))?;
    let controller = if backoff > T::one() {
        HInfController::from_riccati(&plant, &solve_care(&plant, optimal.zeta * backoff)?)
    } else {
        optimal.clone()
    };
    let prior = ControlPrior::linear(
        &controller.k,
        vec![T::zero(); 4],
        ActionBounds::symmetric(true_params.force_limit, 1),
    );
    check_cartpole_grid(&prior, true_params)?;
    Ok(CartPoleDesign { prior, plant, controller, zeta_min: optimal.zeta })
}

/// Runs the prior alone from each grid point; every run must stay inside the
/// divergence guard and finish with |θ| < 0.05.
pub fn check_cartpole_grid<T: Scalar>(prior: &ControlPrior<T>, params: &CartPoleParams<T>) -> Result<(), PriorError> {
    for i in 0..5 {
        for j in 0..5 {
            let theta = T::of(-GRID_THETA + 0.5 * GRID_THETA * i as f64);
            let x = T::of(-GRID_X + 0.5 * GRID_X * j as f64);
            let mut s = CartPoleState::new(x, T::zero(), theta, T::zero());
            for step in 0..GRID_STEPS {
                let u = evaluate_prior(prior, &s.to_vec())?;
                let r = cartpole_step(&s, u[0], params)
                    .map_err(|e| PriorError::NotStabilizing(format!("from θ={theta}, x={x}: {e}")))?;
                if r.done {
                    return Err(PriorError::NotStabilizing(format!(
                        "from θ={theta}, x={x}: guard tripped at step {step}"
                    )));
                }
                s = r.next_state;
            }
            if s.theta.abs() >= T::of(GRID_SETTLED_THETA) {
                return Err(PriorError::NotStabilizing(format!(
                    "from θ={theta}, x={x}: |θ| = {} after {GRID_STEPS} steps",
                    s.theta.abs()
                )));
            }
        }
    }
    Ok(())
}

/// Bang-bang prior with Kp = 0.4, Kd = 0.5 driving the controlled car toward
/// the midpoint of its neighbours.
pub fn build_carfollow_prior<T: Scalar>(params: &CarFollowParams<T>) -> ControlPrior<T> {
    ControlPrior {
        kind: PriorKind::BangBang {
            kp: T::of(0.4),
            kd: T::of(0.5),
            accel_hi: params.accel_hi,
            accel_lo: params.accel_lo,
        },
        bounds: ActionBounds {
            lo: vec![params.accel_lo],
            hi: vec![params.accel_hi],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{CarFollowEnv, Environment};
    use crate::robust_control::is_hurwitz;
    use crate::rng::{child_rng, StreamLabel};

    fn bang() -> ControlPrior<f64> {
        build_carfollow_prior(&CarFollowParams::default())
    }

    #[test]
    fn linear_prior_is_zero_at_setpoint() {
        let k = DMatrix::from_row_slice(1, 2, &[3.0, -1.0]);
        let p = ControlPrior::linear(&k, vec![1.0, 2.0], ActionBounds::symmetric(10.0, 1));
        assert_eq!(p.evaluate(&[1.0, 2.0]).unwrap(), vec![0.0]);
        assert_eq!(p.evaluate(&[2.0, 2.0]).unwrap(), vec![-3.0]);
        assert_eq!(p.evaluate(&[100.0, 2.0]).unwrap(), vec![-10.0]);
        assert!(matches!(p.evaluate(&[1.0]), Err(PriorError::DimensionMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn bang_bang_branches() {
        let p = bang();
        // Δs = 5, Δv = 0 → 0.4·5 > 0
        assert_eq!(p.evaluate(&[15.0, 10.0, 10.0, 10.0, 10.0]).unwrap(), vec![2.5]);
        assert_eq!(p.evaluate(&[12.0, 12.0, 10.0, 10.0, 10.0]).unwrap(), vec![0.0]);
        assert_eq!(p.evaluate(&[30.0, 8.0, 10.0, 10.0, 10.0]).unwrap(), vec![2.5]);
        assert_eq!(p.evaluate(&[8.0, 30.0, 10.0, 10.0, 10.0]).unwrap(), vec![-5.0]);
        // Kp·Δs + Kd·Δv = 0.4·(−5) + 0.5·4 = 0 exactly
        assert_eq!(p.evaluate(&[10.0, 15.0, 12.0, 10.0, 12.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn json_round_trip() {
        let p = bang();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"variant\":\"BangBang\""));
        let back: ControlPrior<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let k = DMatrix::from_row_slice(1, 2, &[3.0, -1.0]);
        let lin = ControlPrior::linear(&k, vec![0.0, 0.0], ActionBounds::symmetric(10.0, 1));
        let back: ControlPrior<f64> = serde_json::from_str(&serde_json::to_string(&lin).unwrap()).unwrap();
        assert_eq!(back, lin);
    }

    #[test]
    fn cartpole_prior_synthesis() {
        let params = CartPoleParams::<f64>::default();
        let d = design_cartpole_prior(&params, PRIOR_MODEL_PERTURBATION, DEFAULT_GAMMA_BACKOFF).unwrap();
        assert!(d.controller.closed_loop_hurwitz(&d.plant));
        assert!(d.zeta_min > 1.0 && d.zeta_min < 10.0, "zeta_min {}", d.zeta_min);
        assert!((d.controller.zeta - 1.2 * d.zeta_min).abs() < 1e-9);
        assert_eq!(d.prior.evaluate(&[0.0; 4]).unwrap(), vec![0.0]);
        // pushing toward the lean recovers the pole
        assert!(d.prior.evaluate(&[0.0, 0.0, 0.1, 0.0]).unwrap()[0] > 0.0);
    }

    #[test]
    fn unperturbed_synthesis_is_hurwitz() {
        let params = CartPoleParams::<f64>::default();
        let d = design_cartpole_prior(&params, 1.0, 1.0).unwrap();
        let plant = linearize_known_model(&params);
        assert!(is_hurwitz(&d.controller.closed_loop(&plant)));
    }

    #[test]
    fn prior_keeps_pole_up_from_small_angle() {
        let params = CartPoleParams::<f64>::default();
        let prior = build_cartpole_prior(&params).unwrap();
        let mut s = CartPoleState::new(0.0, 0.0, 0.1, 0.0);
        for _ in 0..100 {
            let u = prior.evaluate(&s.to_vec()).unwrap();
            let r = cartpole_step(&s, u[0], &params).unwrap();
            assert!(r.next_state.theta.abs() < std::f64::consts::FRAC_PI_2);
            s = r.next_state;
        }
    }

    #[test]
    fn carfollow_prior_is_mostly_collision_free() {
        let params = CarFollowParams::<f64>::default();
        let prior = bang();
        let mut env = CarFollowEnv::new(params).unwrap();
        let seeds = 100;
        let mut collisions = 0;
        for seed in 0..seeds {
            let mut rng = child_rng(seed, StreamLabel::Environment);
            let mut obs = env.reset(&mut rng);
            loop {
                let a = prior.evaluate(&obs).unwrap();
                let r = env.step(&a).unwrap();
                obs = r.next_state;
                if r.guard {
                    collisions += 1;
                }
                if r.done {
                    break;
                }
            }
        }
        assert!(collisions * 20 <= seeds, "{collisions} collisions in {seeds} seeds");
    }
}
