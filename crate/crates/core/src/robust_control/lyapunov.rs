use nalgebra::{DMatrix, DVector};

use super::linalg::spectral_abscissa;
use super::{fro, symmetrize, tol, ControlError, HURWITZ_MARGIN};
use crate::Scalar;

/// Solves AᵀX + XA + Q = 0 for a Hurwitz `a` and symmetric `q`.
///
/// The returned X is symmetric.
pub fn solve_lyapunov<T: Scalar>(a: &DMatrix<T>, q: &DMatrix<T>) -> Result<DMatrix<T>, ControlError> {
    check_shapes(a, q)?;
    let abscissa = spectral_abscissa(a).ok_or(ControlError::EigenFailure)?;
    if abscissa >= -T::of(HURWITZ_MARGIN) {
        return Err(ControlError::NotHurwitz {
            abscissa: abscissa.to_f64_lossy(),
        });
    }
    let x = lyapunov_kronecker(a, q)?;
    let residual = lyapunov_residual(a, &x, q);
    if residual > tol::<T>(1e-10) * (T::one() + fro(&x)) {
        // a Hurwitz A cannot give a consistent-but-inaccurate solution unless the
        // Kronecker system is badly conditioned
        return Err(ControlError::SingularSystem);
    }
    Ok(x)
}

/// Kronecker-product solve of AᵀX + XA + Q = 0 with no stability precondition.
///
/// Used inside Newton iterations where intermediate closed loops may not be
/// Hurwitz. Fails only if the n²×n² system is numerically singular.
pub(crate) fn lyapunov_kronecker<T: Scalar>(
    a: &DMatrix<T>,
    q: &DMatrix<T>,
) -> Result<DMatrix<T>, ControlError> {
    check_shapes(a, q)?;
    let n = a.nrows();
    let at = a.transpose();
    let eye = DMatrix::<T>::identity(n, n);
    // column-major vec: vec(AᵀX) = (I ⊗ Aᵀ) vec X, vec(XA) = (Aᵀ ⊗ I) vec X
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let lu = k.clone().full_piv_lu();
    let u = lu.u();
    let mut max_pivot = T::zero();
    let mut min_pivot = T::max_value().expect("bounded scalar");
    for i in 0..u.nrows() {
        let p = u[(i, i)].abs();
        max_pivot = max_pivot.max(p);
        min_pivot = min_pivot.min(p);
    }
    if max_pivot == T::zero() || min_pivot <= max_pivot * T::eps() * T::of((n * n) as f64) {
        return Err(ControlError::SingularSystem);
    }
    let rhs = DVector::from_iterator(n * n, q.iter().map(|&x| -x));
    let mut sol = lu.solve(&rhs).ok_or(ControlError::SingularSystem)?;
    // two rounds of iterative refinement
    for _ in 0..2 {
        let r = &rhs - &k * &sol;
        match lu.solve(&r) {
            Some(dx) => sol += dx,
            None => break,
        }
    }
    if !sol.iter().all(|x| x.is_finite()) {
        return Err(ControlError::SingularSystem);
    }
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(symmetrize(&x))
}

/// ‖AᵀX + XA + Q‖_F.
pub(crate) fn lyapunov_residual<T: Scalar>(a: &DMatrix<T>, x: &DMatrix<T>, q: &DMatrix<T>) -> T {
    fro(&(a.transpose() * x + x * a + q))
}

fn check_shapes<T: Scalar>(a: &DMatrix<T>, q: &DMatrix<T>) -> Result<(), ControlError> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(ControlError::Shape("A must be square and nonempty".into()));
    }
    if q.shape() != a.shape() {
        return Err(ControlError::Shape(format!(
            "Q is {}x{}, A is {}x{}",
            q.nrows(),
            q.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_case() {
        let x = solve_lyapunov(&DMatrix::<f64>::from_row_slice(1, 1, &[-1.0]), &DMatrix::from_row_slice(1, 1, &[2.0]))
            .unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn decoupled_identity() {
        let a = -DMatrix::<f64>::identity(2, 2);
        let x = solve_lyapunov(&a, &DMatrix::identity(2, 2)).unwrap();
        assert!((x - DMatrix::<f64>::identity(2, 2) * 0.5).abs().max() < 1e-14);
    }

    #[test]
    fn rejects_unstable_a() {
        let err = solve_lyapunov(&DMatrix::from_row_slice(1, 1, &[0.5]), &DMatrix::from_row_slice(1, 1, &[1.0]))
            .unwrap_err();
        assert!(matches!(err, ControlError::NotHurwitz { .. }));
    }

    #[test]
    fn kronecker_detects_singular_system() {
        // eigenvalues ±1 sum to zero, so the Kronecker operator is singular
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = lyapunov_kronecker(&a, &DMatrix::identity(2, 2)).unwrap_err();
        assert_eq!(err, ControlError::SingularSystem);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let err = solve_lyapunov(&-DMatrix::<f64>::identity(2, 2), &DMatrix::identity(3, 3)).unwrap_err();
        assert!(matches!(err, ControlError::Shape(_)));
    }
}
