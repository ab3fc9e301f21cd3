//! Lyapunov certificates for the mixed policy built on the H∞ prior's P:
//! the invariant-set radius, the pointwise decrease condition, empirical
//! bounds on model error, and trajectory monitoring.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environments::{ActionBounds, EnvError, Simulator};
use crate::robust_control::{matrix_norms, HInfController, LinearPlant};
use crate::Scalar;

const SIGMA_M_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("sigma_m = {0} is too small for a meaningful certificate")]
    DegenerateSigmaM(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no monitor data: {0}")]
    MissingMonitorData(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl StabilityError {
    pub fn code(&self) -> &'static str {
        match self {
            StabilityError::DegenerateSigmaM(_) => "DegenerateSigmaM",
            StabilityError::InvalidInput(_) => "InvalidInput",
            StabilityError::MissingMonitorData(_) => "MissingMonitorData",
            StabilityError::Env(_) => "EnvError",
        }
    }
}

/// Radius of the ball {‖s‖₂ ≤ radius} shown forward invariant for the mixed
/// policy, with the inputs it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StabilityCertificate<T: Scalar> {
    pub p: Vec<Vec<T>>,
    pub sigma_m: T,
    pub c_d: T,
    pub c_pi: T,
    pub lambda: T,
    pub radius: T,
}

/// C1ᵀC1 + ζ⁻²PB1B1ᵀP, the quadratic form that bounds −V̇ for the prior alone.
pub fn decrease_form<T: Scalar>(plant: &LinearPlant<T>, ctrl: &HInfController<T>) -> DMatrix<T> {
    let pb1 = &ctrl.p * &plant.b1;
    plant.c1.transpose() * &plant.c1 + &pb1 * pb1.transpose() / (ctrl.zeta * ctrl.zeta)
}

/// Smallest singular value of [`decrease_form`].
pub fn sigma_m<T: Scalar>(plant: &LinearPlant<T>, ctrl: &HInfController<T>) -> T {
    matrix_norms(&decrease_form(plant, ctrl)).min_singular_value
}

/// (2‖P‖₂C_D + 2/(1+λ)·‖PB2‖₂C_π) / σ_m.
pub fn stability_radius<T: Scalar>(
    plant: &LinearPlant<T>,
    ctrl: &HInfController<T>,
    c_d: T,
    c_pi: T,
    lambda: T,
) -> Result<StabilityCertificate<T>, StabilityError> {
    for (name, v) in [("C_D", c_d), ("C_pi", c_pi), ("lambda", lambda)] {
        if !(v >= T::zero()) || !v.is_finite() {
            return Err(StabilityError::InvalidInput(format!("{name} must be finite and ≥ 0, got {v}")));
        }
    }
    let sm = sigma_m(plant, ctrl);
    if sm <= T::of(SIGMA_M_FLOOR) {
        return Err(StabilityError::DegenerateSigmaM(sm.to_f64_lossy()));
    }
    let two = T::of(2.0);
    let p_norm = matrix_norms(&ctrl.p).spectral_norm;
    let pb2_norm = matrix_norms(&(&ctrl.p * &plant.b2)).spectral_norm;
    let radius = (two * p_norm * c_d + two / (T::one() + lambda) * pb2_norm * c_pi) / sm;
    Ok(StabilityCertificate {
        p: rows(&ctrl.p),
        sigma_m: sm,
        c_d,
        c_pi,
        lambda,
        radius,
    })
}

fn rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// sᵀ(C1ᵀC1 + ζ⁻²PB1B1ᵀP)s − 2sᵀP(d + B2u_e/(1+λ)); positive exactly when
/// the decrease condition holds.
pub fn lemma2_margin<T: Scalar>(
    s: &[T],
    d: &[T],
    u_e: &[T],
    plant: &LinearPlant<T>,
    ctrl: &HInfController<T>,
    lambda: T,
) -> T {
    let s = DVector::from_column_slice(s);
    let d = DVector::from_column_slice(d);
    let u_e = DVector::from_column_slice(u_e);
    let push = d + &plant.b2 * u_e / (T::one() + lambda);
    let lhs = (s.transpose() * &ctrl.p * push)[(0, 0)] * T::of(2.0);
    let rhs = (s.transpose() * decrease_form(plant, ctrl) * &s)[(0, 0)];
    rhs - lhs
}

/// Strict decrease condition; implies V̇(s) < 0 for ṡ = As + B2a + d under
/// the mixed action a = −Ks + u_e/(1+λ).
pub fn lemma2_condition<T: Scalar>(
    s: &[T],
    d: &[T],
    u_e: &[T],
    plant: &LinearPlant<T>,
    ctrl: &HInfController<T>,
    lambda: T,
) -> bool {
    lemma2_margin(s, d, u_e, plant, ctrl, lambda) > T::zero()
}

/// Empirical max of ‖f(s,a) − As − B2a‖₂ over the samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DisturbanceBound<T: Scalar> {
    pub c_d: T,
    pub samples: usize,
}

/// f is approximated by (step(s, a) − s)/dt on the true simulator; every
/// state is paired with every action.
pub fn estimate_disturbance_bound<T: Scalar>(
    sim: &dyn Simulator<T>,
    plant: &LinearPlant<T>,
    states: &[Vec<T>],
    actions: &[Vec<T>],
) -> Result<DisturbanceBound<T>, StabilityError> {
    let n = plant.state_dim();
    if sim.state_dim() != n {
        return Err(StabilityError::InvalidInput(format!(
            "simulator has {} states, plant {n}",
            sim.state_dim()
        )));
    }
    let dt = sim.dt();
    let mut c_d = T::zero();
    let mut samples = 0;
    for s in states {
        let sv = DVector::from_column_slice(s);
        for a in actions {
            let next = sim.advance(s, a)?;
            let f = (DVector::from_column_slice(&next) - &sv) / dt;
            let lin = &plant.a * &sv + &plant.b2 * DVector::from_column_slice(a);
            c_d = c_d.max((f - lin).norm());
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(StabilityError::InvalidInput("no (state, action) samples".into()));
    }
    Ok(DisturbanceBound { c_d, samples })
}

/// Box over (x, ẋ, θ, θ̇) used to sample and report the cartpole's monitored
/// region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleRegion {
    pub x_max: f64,
    pub x_dot_max: f64,
    pub theta_max: f64,
    pub theta_dot_max: f64,
}

impl Default for CartPoleRegion {
    fn default() -> Self {
        Self {
            x_max: 3.0,
            x_dot_max: 1.0,
            theta_max: 0.5,
            theta_dot_max: 1.0,
        }
    }
}

impl CartPoleRegion {
    /// Tensor grid with `per_axis` evenly spaced points on each axis.
    pub fn grid<T: Scalar>(&self, per_axis: usize) -> Vec<Vec<T>> {
        let axis = |m: f64| -> Vec<f64> {
            if per_axis <= 1 {
                vec![0.0]
            } else {
                (0..per_axis).map(|i| -m + 2.0 * m * i as f64 / (per_axis - 1) as f64).collect()
            }
        };
        let mut out = Vec::new();
        for &x in &axis(self.x_max) {
            for &xd in &axis(self.x_dot_max) {
                for &th in &axis(self.theta_max) {
                    for &thd in &axis(self.theta_dot_max) {
                        out.push([x, xd, th, thd].map(T::of).to_vec());
                    }
                }
            }
        }
        out
    }

    /// Euclidean norm of the box's corner.
    pub fn radius(&self) -> f64 {
        (self.x_max.powi(2) + self.x_dot_max.powi(2) + self.theta_max.powi(2) + self.theta_dot_max.powi(2)).sqrt()
    }
}

/// A-priori bound on ‖u_RL − u_prior‖₂: both actions lie in the box, the
/// prior's magnitude is bounded by ‖K‖₂ times the state radius.
pub fn c_pi_bound<T: Scalar>(bounds: &ActionBounds<T>, k: &DMatrix<T>, state_radius: T) -> T {
    bounds.range_norm() + matrix_norms(k).spectral_norm * state_radius
}

/// V(s) = sᵀPs along a trajectory with its finite-difference derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LyapunovTrace<T: Scalar> {
    pub v: Vec<T>,
    /// Central differences inside, one-sided at the ends.
    pub v_dot: Vec<T>,
    pub max_state_norm: T,
    /// max |s_i| over the trajectory for each component.
    pub max_abs: Vec<T>,
}

pub fn monitor_trajectory<T: Scalar>(
    states: &[Vec<T>],
    p: &DMatrix<T>,
    dt: T,
) -> Result<LyapunovTrace<T>, StabilityError> {
    if states.is_empty() {
        return Err(StabilityError::MissingMonitorData("empty trajectory".into()));
    }
    let n = p.nrows();
    if states.iter().any(|s| s.len() != n) {
        return Err(StabilityError::InvalidInput(format!("states must have {n} entries")));
    }
    let v: Vec<T> = states
        .iter()
        .map(|s| {
            let s = DVector::from_column_slice(s);
            (s.transpose() * p * &s)[(0, 0)]
        })
        .collect();
    let k = v.len();
    let v_dot = (0..k)
        .map(|i| match (i, k) {
            (_, 1) => T::zero(),
            (0, _) => (v[1] - v[0]) / dt,
            (i, k) if i == k - 1 => (v[k - 1] - v[k - 2]) / dt,
            (i, _) => (v[i + 1] - v[i - 1]) / (T::of(2.0) * dt),
        })
        .collect();
    let mut max_abs = vec![T::zero(); n];
    let mut max_state_norm = T::zero();
    for s in states {
        let mut sq = T::zero();
        for (m, &x) in max_abs.iter_mut().zip(s) {
            *m = m.max(x.abs());
            sq += x * x;
        }
        max_state_norm = max_state_norm.max(sq.sqrt());
    }
    Ok(LyapunovTrace { v, v_dot, max_state_norm, max_abs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{cartpole_step, linearize_known_model, CartPoleParams, CartPoleState};
    use crate::priors::{design_cartpole_prior, evaluate_prior, DEFAULT_GAMMA_BACKOFF};
    use crate::robust_control::solve_care;
    use proptest::prelude::*;

    fn m(x: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 1, &[x])
    }

    fn scalar() -> (LinearPlant<f64>, HInfController<f64>) {
        let plant = LinearPlant::new(m(0.0), m(1.0), m(1.0), m(1.0)).unwrap();
        let sol = solve_care(&plant, 2f64.sqrt()).unwrap();
        let ctrl = HInfController::from_riccati(&plant, &sol);
        (plant, ctrl)
    }

    #[test]
    fn scalar_radius_example() {
        let (plant, ctrl) = scalar();
        assert!((sigma_m(&plant, &ctrl) - 2.0).abs() < 1e-9);
        let cert = stability_radius(&plant, &ctrl, 0.1, 1.0, 1.0).unwrap();
        let r2 = 2f64.sqrt();
        let expected = (2.0 * r2 * 0.1 + r2) / 2.0;
        assert!((cert.radius - expected).abs() < 1e-9);
        assert!((cert.radius - 0.8485).abs() < 1e-4);
        assert_eq!(stability_radius(&plant, &ctrl, 0.0, 0.0, 3.0).unwrap().radius, 0.0);
        let far = stability_radius(&plant, &ctrl, 0.1, 1.0, 1e12).unwrap().radius;
        assert!((far - 2.0 * r2 * 0.1 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_negative_bounds() {
        let (plant, ctrl) = scalar();
        assert!(stability_radius(&plant, &ctrl, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn condition_edge_cases() {
        let (plant, ctrl) = scalar();
        assert!(lemma2_condition(&[0.5], &[0.0], &[0.0], &plant, &ctrl, 1.0));
        assert!(!lemma2_condition(&[0.0], &[0.0], &[0.0], &plant, &ctrl, 1.0));
    }

    /// V̇ of ṡ = As + B2(−Ks + u_e/(1+λ)) + d by central differences of V
    /// along an RK4-integrated trajectory.
    fn fd_vdot(s: &[f64], d: &[f64], u_e: &[f64], plant: &LinearPlant<f64>, ctrl: &HInfController<f64>, lambda: f64) -> f64 {
        let s0 = DVector::from_column_slice(s);
        let d = DVector::from_column_slice(d);
        let push = &plant.b2 * DVector::from_column_slice(u_e) / (1.0 + lambda) + d;
        let closed = ctrl.closed_loop(plant);
        let f = |x: &DVector<f64>| &closed * x + &push;
        let rk4 = |x: &DVector<f64>, h: f64| {
            let k1 = f(x);
            let k2 = f(&(x + &k1 * (h / 2.0)));
            let k3 = f(&(x + &k2 * (h / 2.0)));
            let k4 = f(&(x + &k3 * h));
            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        };
        let h = 1e-6;
        let v = |x: &DVector<f64>| (x.transpose() * &ctrl.p * x)[(0, 0)];
        (v(&rk4(&s0, h)) - v(&rk4(&s0, -h))) / (2.0 * h)
    }

    fn cartpole_design() -> &'static crate::priors::CartPoleDesign<f64> {
        static D: std::sync::OnceLock<crate::priors::CartPoleDesign<f64>> = std::sync::OnceLock::new();
        D.get_or_init(|| design_cartpole_prior(&CartPoleParams::default(), 1.6, DEFAULT_GAMMA_BACKOFF).unwrap())
    }

    proptest! {
        #[test]
        fn condition_implies_decrease_scalar(s in -3.0..3.0f64, d in -1.0..1.0f64, ue in -2.0..2.0f64, lambda in 0.0..10.0f64) {
            let (plant, ctrl) = scalar();
            let margin = lemma2_margin(&[s], &[d], &[ue], &plant, &ctrl, lambda);
            if margin > 1e-6 {
                prop_assert!(fd_vdot(&[s], &[d], &[ue], &plant, &ctrl, lambda) < 0.0);
            }
        }

        #[test]
        fn condition_implies_decrease_cartpole(
            s in proptest::collection::vec(-0.5..0.5f64, 4),
            d in proptest::collection::vec(-0.2..0.2f64, 4),
            ue in -5.0..5.0f64,
            lambda in 0.0..10.0f64,
        ) {
            let design = cartpole_design();
            let (plant, ctrl) = (&design.plant, &design.controller);
            let margin = lemma2_margin(&s, &d, &[ue], plant, ctrl, lambda);
            if margin > 1e-6 {
                prop_assert!(fd_vdot(&s, &d, &[ue], plant, ctrl, lambda) < 0.0);
            }
        }

        #[test]
        fn radius_monotone(l1 in 0.0..50.0f64, dl in 0.0..50.0f64, cd in 0.0..2.0f64, cpi in 0.0..20.0f64) {
            let (plant, ctrl) = scalar();
            let a = stability_radius(&plant, &ctrl, cd, cpi, l1).unwrap().radius;
            let b = stability_radius(&plant, &ctrl, cd, cpi, l1 + dl).unwrap().radius;
            prop_assert!(b <= a);
            let c = stability_radius(&plant, &ctrl, cd + 0.1, cpi + 0.1, l1).unwrap().radius;
            prop_assert!(c >= a);
        }
    }

    /// Explicit Euler on the plant itself: no model error at all.
    struct LinearSim(LinearPlant<f64>);

    impl Simulator<f64> for LinearSim {
        fn state_dim(&self) -> usize {
            self.0.state_dim()
        }
        fn dt(&self) -> f64 {
            0.01
        }
        fn advance(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>, EnvError> {
            let sv = DVector::from_column_slice(s);
            let next = &sv + (&self.0.a * &sv + &self.0.b2 * DVector::from_column_slice(a)) * 0.01;
            Ok(next.as_slice().to_vec())
        }
    }

    #[test]
    fn disturbance_bound_examples() {
        let params = CartPoleParams::<f64>::default();
        let plant = linearize_known_model(&params);
        let region = CartPoleRegion::default();
        let states = region.grid::<f64>(3);
        let actions = vec![vec![-10.0], vec![0.0], vec![10.0]];
        let exact = estimate_disturbance_bound(&LinearSim(plant.clone()), &plant, &states, &actions).unwrap();
        assert!(exact.c_d <= 1e-8, "{}", exact.c_d);
        assert_eq!(exact.samples, 81 * 3);

        let perturbed = linearize_known_model(&params.perturbed(1.6));
        let origin = vec![vec![0.0; 4]];
        let at_origin = estimate_disturbance_bound(&params, &perturbed, &origin, &actions).unwrap();
        assert!(at_origin.c_d > 0.0);

        let small = CartPoleRegion { theta_max: 0.25, ..region };
        let narrow = estimate_disturbance_bound(&params, &perturbed, &small.grid(3), &actions).unwrap();
        let wide = estimate_disturbance_bound(&params, &perturbed, &region.grid(3), &actions).unwrap();
        let mut both = small.grid(3);
        both.extend(region.grid(3));
        let union = estimate_disturbance_bound(&params, &perturbed, &both, &actions).unwrap();
        assert!(union.c_d >= narrow.c_d && union.c_d >= wide.c_d);
    }

    #[test]
    fn monitor_examples() {
        let p = DMatrix::<f64>::identity(2, 2);
        let constant = vec![vec![1.0, 2.0]; 5];
        let tr = monitor_trajectory(&constant, &p, 0.1).unwrap();
        assert!(tr.v_dot.iter().all(|&x| x == 0.0));
        let decaying: Vec<Vec<f64>> = (0..10).map(|k| vec![0.8f64.powi(k), -0.8f64.powi(k)]).collect();
        let tr = monitor_trajectory(&decaying, &p, 0.1).unwrap();
        assert!(tr.v.windows(2).all(|w| w[1] < w[0]));
        assert!(tr.v_dot.iter().all(|&x| x < 0.0));
        assert_eq!(tr.max_abs, vec![1.0, 1.0]);
        assert!(monitor_trajectory::<f64>(&[], &p, 0.1).is_err());
    }

    #[test]
    fn prior_only_run_stays_upright() {
        let params = CartPoleParams::<f64>::default();
        let d = cartpole_design();
        let mut s = CartPoleState::new(0.5, 0.0, 0.15, 0.0);
        let mut states = vec![s.to_vec()];
        for _ in 0..200 {
            let u = evaluate_prior(&d.prior, &s.to_vec()).unwrap();
            s = cartpole_step(&s, u[0], &params).unwrap().next_state;
            states.push(s.to_vec());
        }
        let tr = monitor_trajectory(&states, &d.controller.p, params.tau).unwrap();
        assert!(tr.max_abs[2] < std::f64::consts::FRAC_PI_2);
        assert!(tr.v.last().unwrap() < &tr.v[0]);
    }

    #[test]
    fn c_pi_bound_adds_range_and_gain() {
        let k = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let b = ActionBounds::symmetric(10.0, 1);
        assert!((c_pi_bound::<f64>(&b, &k, 2.0) - (20.0 + 5.0 * 2.0)).abs() < 1e-12);
    }
}
