use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::linalg::{is_hurwitz, stabilizability_check};
use super::riccati::{solve_care, RiccatiSolution};
use super::{ControlError, LinearPlant};
use crate::Scalar;

pub const MAX_BISECTION_ITERS: usize = 60;
pub const DEFAULT_BISECTION_TOL: f64 = 1e-4;

/// State-feedback H∞ controller u = −K s with K = B2ᵀP.
///
/// `zeta` is the attenuation level the Riccati solution was computed at (the
/// same quantity is written γ in Riccati-equation notation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct HInfController<T: Scalar> {
    pub k: DMatrix<T>,
    pub p: DMatrix<T>,
    pub zeta: T,
}

impl<T: Scalar> HInfController<T> {
    /// Builds the controller from a Riccati solution for `plant`.
    pub fn from_riccati(plant: &LinearPlant<T>, sol: &RiccatiSolution<T>) -> Self {
        Self {
            k: plant.b2.transpose() * &sol.p,
            p: sol.p.clone(),
            zeta: sol.gamma,
        }
    }

    pub fn closed_loop(&self, plant: &LinearPlant<T>) -> DMatrix<T> {
        &plant.a - &plant.b2 * &self.k
    }

    pub fn closed_loop_hurwitz(&self, plant: &LinearPlant<T>) -> bool {
        is_hurwitz(&self.closed_loop(plant))
    }
}

/// Bisects the attenuation level over `(lo, hi)` down to `tol` and returns the
/// controller at the smallest feasible level found.
///
/// If `lo` itself is feasible it is returned directly.
pub fn synthesize_hinf<T: Scalar>(
    plant: &LinearPlant<T>,
    gamma_bracket: (T, T),
    tol: T,
) -> Result<HInfController<T>, ControlError> {
    let (mut lo, mut hi) = gamma_bracket;
    if !(lo > T::zero()) || !(hi > lo) || !hi.is_finite() {
        return Err(ControlError::InvalidInput(format!(
            "gamma bracket must satisfy 0 < lo < hi, got ({lo}, {hi})"
        )));
    }
    if !(tol > T::zero()) {
        return Err(ControlError::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if !stabilizability_check(&plant.a, &plant.b2) {
        return Err(ControlError::NotStabilizable);
    }
    let mut best = match solve_care(plant, hi) {
        Ok(sol) => sol,
        Err(ControlError::NoStabilizingSolution { .. }) => {
            return Err(ControlError::InfeasibleBracket { hi: hi.to_f64_lossy() })
        }
        Err(e) => return Err(e),
    };
    if let Ok(sol) = solve_care(plant, lo) {
        return Ok(HInfController::from_riccati(plant, &sol));
    }
    for _ in 0..MAX_BISECTION_ITERS {
        if hi - lo <= tol {
            break;
        }
        let mid = (lo + hi) * T::of(0.5);
        match solve_care(plant, mid) {
            Ok(sol) => {
                hi = mid;
                best = sol;
            }
            Err(ControlError::NoStabilizingSolution { .. }) => lo = mid,
            Err(e) => return Err(e),
        }
    }
    let ctrl = HInfController::from_riccati(plant, &best);
    debug_assert!(ctrl.closed_loop_hurwitz(plant));
    Ok(ctrl)
}
