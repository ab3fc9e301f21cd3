use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::linalg::{eigenvalues, is_hurwitz, spectral_norm, stabilizability_check};
use super::lyapunov::{lyapunov_kronecker, solve_lyapunov};
use super::{fro, symmetrize, tol, ControlError, LinearPlant};
use crate::Scalar;

const MAX_NEWTON_ITERS: usize = 200;
const MAX_RECURSION_ITERS: usize = 500;

/// Stabilizing solution of the H∞ algebraic Riccati equation
/// AᵀP + PA + C1ᵀC1 + γ⁻²PB1B1ᵀP − PB2B2ᵀP = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RiccatiSolution<T: Scalar> {
    pub p: DMatrix<T>,
    pub gamma: T,
    /// Frobenius norm of the ARE residual at `p`.
    pub residual: T,
    pub newton_iterations: usize,
}

/// ‖AᵀP + PA + C1ᵀC1 + γ⁻²PB1B1ᵀP − PB2B2ᵀP‖_F, evaluated term by term.
pub fn care_residual<T: Scalar>(plant: &LinearPlant<T>, gamma: T, p: &DMatrix<T>) -> T {
    let LinearPlant { a, b1, b2, c1 } = plant;
    let g2 = T::one() / (gamma * gamma);
    let r = a.transpose() * p + p * a + c1.transpose() * c1 + p * b1 * b1.transpose() * p * g2
        - p * b2 * b2.transpose() * p;
    fro(&r)
}

/// Solves the H∞ Riccati equation at attenuation level `gamma`.
///
/// A monotone recursion of LQR-type Riccati equations (Lanzon, Feng, Anderson
/// and Rotkowitz, 2008) brings the iterate close to the stabilizing solution,
/// then Newton's method polishes it. Fails with `NoStabilizingSolution` when no
/// positive semidefinite P with A − (B2B2ᵀ − γ⁻²B1B1ᵀ)P Hurwitz is found, which
/// is the signature of γ lying below the achievable attenuation.
pub fn solve_care<T: Scalar>(plant: &LinearPlant<T>, gamma: T) -> Result<RiccatiSolution<T>, ControlError> {
    if !(gamma > T::zero()) || !gamma.is_finite() {
        return Err(ControlError::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    if !stabilizability_check(&plant.a, &plant.b2) {
        return Err(ControlError::NotStabilizable);
    }
    let q = plant.c1.transpose() * &plant.c1;
    let s = &plant.b2 * plant.b2.transpose() - &plant.b1 * plant.b1.transpose() / (gamma * gamma);
    let fail = |reason: &str| ControlError::NoStabilizingSolution {
        gamma: gamma.to_f64_lossy(),
        reason: reason.to_string(),
    };
    if hamiltonian_has_imaginary_eigenvalues(&plant.a, &s, &q)? {
        return Err(fail("Hamiltonian has eigenvalues on the imaginary axis"));
    }
    let (p0, outer) = lqr_recursion(plant, gamma, &q).map_err(|r| fail(r))?;
    let (p, iters) = newton(&plant.a, &s, &q, p0).map_err(|r| fail(r))?;
    let iters = iters + outer;

    let residual = care_residual(plant, gamma, &p);
    let scale = T::one() + fro(&p);
    if residual > tol::<T>(1e-8) * scale {
        return Err(fail("residual above tolerance"));
    }
    let closed = &plant.a - &s * &p;
    if !is_hurwitz(&closed) {
        return Err(fail("closed loop A - (B2B2' - B1B1'/gamma^2)P is not Hurwitz"));
    }
    let min_eig = nalgebra::SymmetricEigen::new(p.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(T::max_value().expect("bounded"), |a, b| a.min(b));
    if min_eig < -tol::<T>(1e-9) * spectral_norm(&p).max(T::one()) {
        return Err(fail("solution is indefinite"));
    }
    Ok(RiccatiSolution {
        p,
        gamma,
        residual,
        newton_iterations: iters,
    })
}

/// Newton iteration for AᵀP + PA + Q − PSP = 0 starting from `p`.
///
/// Each step solves (A − SPₖ)ᵀX + X(A − SPₖ) + Q + PₖSPₖ = 0. Two consecutive
/// non-Hurwitz iterates abort the iteration.
fn newton<T: Scalar>(
    a: &DMatrix<T>,
    s: &DMatrix<T>,
    q: &DMatrix<T>,
    mut p: DMatrix<T>,
) -> Result<(DMatrix<T>, usize), &'static str> {
    let mut unstable_streak = 0;
    let mut best: Option<(T, DMatrix<T>)> = None;
    for iter in 1..=MAX_NEWTON_ITERS {
        let ak = a - s * &p;
        if is_hurwitz(&ak) {
            unstable_streak = 0;
        } else {
            unstable_streak += 1;
            if unstable_streak >= 2 {
                return Err("two consecutive non-Hurwitz Newton iterates");
            }
        }
        let constant = q + &p * s * &p;
        let next = lyapunov_kronecker(&ak, &constant).map_err(|_| "singular Newton step")?;
        if !next.iter().all(|x| x.is_finite()) {
            return Err("Newton iterate diverged");
        }
        let step = fro(&(&next - &p));
        p = next;
        let scale = T::one() + fro(&p);
        let residual = fro(&(a.transpose() * &p + &p * a + q - &p * s * &p));
        if best.as_ref().map_or(true, |(r, _)| residual < *r) {
            best = Some((residual, p.clone()));
        }
        if residual <= T::of(1e3) * T::eps() * scale * scale.max(T::one())
            || step <= T::of(10.0) * T::eps() * scale
        {
            return Ok((p, iter));
        }
    }
    // stagnation at rounding level still counts as converged; the caller
    // checks the residual against the stated tolerance
    match best {
        Some((_, p)) => Ok((p, MAX_NEWTON_ITERS)),
        None => Err("Newton iteration did not converge"),
    }
}

/// A stabilizing solution requires the Hamiltonian [[A, −S], [−Q, −Aᵀ]] to
/// have no eigenvalues on the imaginary axis.
fn hamiltonian_has_imaginary_eigenvalues<T: Scalar>(
    a: &DMatrix<T>,
    s: &DMatrix<T>,
    q: &DMatrix<T>,
) -> Result<bool, ControlError> {
    let n = a.nrows();
    let mut h = DMatrix::<T>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let eig = eigenvalues(&h).ok_or(ControlError::EigenFailure)?;
    let scale = T::one() + fro(&h);
    Ok(eig.iter().any(|z| z.re.abs() <= tol::<T>(1e-9) * scale))
}

/// Xₖ₊₁ = Xₖ + Zₖ where Zₖ is the stabilizing solution of
/// AₖᵀZ + ZAₖ − ZB2B2ᵀZ + R(Xₖ) = 0 with Aₖ = A + (γ⁻²B1B1ᵀ − B2B2ᵀ)Xₖ and R the
/// H∞ Riccati operator. R(Xₖ₊₁) = γ⁻²ZₖB1B1ᵀZₖ stays PSD and Xₖ increases
/// monotonically; it converges when a PSD stabilizing solution exists and
/// grows without bound otherwise.
fn lqr_recursion<T: Scalar>(
    plant: &LinearPlant<T>,
    gamma: T,
    q: &DMatrix<T>,
) -> Result<(DMatrix<T>, usize), &'static str> {
    let LinearPlant { a, b1, b2, .. } = plant;
    let g2 = T::one() / (gamma * gamma);
    let coupling = b1 * b1.transpose() * g2 - b2 * b2.transpose();
    let mut x = DMatrix::<T>::zeros(a.nrows(), a.ncols());
    let mut r = q.clone();
    for iter in 1..=MAX_RECURSION_ITERS {
        let ak = a + &coupling * &x;
        let z = lqr_newton(&ak, b2, &r).map_err(|_| "LQR subproblem has no stabilizing solution")?;
        x = symmetrize(&(x + &z));
        if !x.iter().all(|v| v.is_finite()) {
            return Err("recursion diverged");
        }
        if fro(&x) > T::of(1e12) * (T::one() + fro(q)) {
            return Err("recursion diverged");
        }
        let bz = b1.transpose() * &z;
        r = symmetrize(&(bz.transpose() * bz * g2));
        if fro(&r) <= tol::<T>(1e-9) * (T::one() + fro(&x)) {
            return Ok((x, iter));
        }
    }
    Err("recursion did not converge")
}

/// Stabilizing LQR solution of AᵀP + PA + Q − PBBᵀP = 0 (Kleinman's method).
fn lqr_newton<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, q: &DMatrix<T>) -> Result<DMatrix<T>, ControlError> {
    let mut k = stabilizing_gain(a, b)?;
    let mut p = DMatrix::<T>::zeros(a.nrows(), a.ncols());
    let mut prev_step = T::max_value().expect("bounded");
    for iter in 0..MAX_NEWTON_ITERS {
        let ak = a - b * &k;
        let next = solve_lyapunov(&ak, &(q + k.transpose() * &k))?;
        let step = fro(&(&next - &p));
        p = next;
        k = b.transpose() * &p;
        // quadratic convergence ends in rounding noise; stop once steps stop shrinking
        if step <= T::of(1e3) * T::eps() * (T::one() + fro(&p)) || (iter > 2 && step >= prev_step) {
            break;
        }
        prev_step = step;
    }
    Ok(symmetrize(&p))
}

/// Initial stabilizing gain by Bass's method: with β above the spectral radius
/// of A, solve (A + βI)Z + Z(A + βI)ᵀ = 2BBᵀ and take K = BᵀZ⁻¹, which places
/// the spectrum of A − BK on Re = −β.
fn stabilizing_gain<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>, ControlError> {
    let n = a.nrows();
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let radius = eigenvalues(a)
        .ok_or(ControlError::EigenFailure)?
        .iter()
        .map(|z| z.norm_sqr().sqrt())
        .fold(T::zero(), |m, x| m.max(x));
    let beta = T::one() + radius * T::of(1.5);
    let shifted = -(a + DMatrix::<T>::identity(n, n) * beta);
    // solve_lyapunov(M, Q) handles MᵀZ + ZM + Q = 0
    let z = solve_lyapunov(&shifted.transpose(), &(b * b.transpose() * T::of(2.0)))?;
    let candidates = [
        z.clone().try_inverse(),
        z.clone().pseudo_inverse(T::of(1e-12) * fro(&z)).ok(),
    ];
    for zinv in candidates.into_iter().flatten() {
        let k = b.transpose() * zinv;
        if is_hurwitz(&(a - b * &k)) {
            return Ok(k);
        }
    }
    Err(ControlError::NotStabilizable)
}
