use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use super::fro;
use crate::Scalar;

/// A matrix is Hurwitz when every eigenvalue has real part below `-HURWITZ_MARGIN`.
pub const HURWITZ_MARGIN: f64 = 1e-10;

/// Eigenvalues of a square real matrix via the real Schur form.
pub fn eigenvalues<T: Scalar>(a: &DMatrix<T>) -> Option<Vec<Complex<T>>> {
    if !a.is_square() {
        return None;
    }
    if a.nrows() == 0 {
        return Some(Vec::new());
    }
    if !a.iter().all(|x| x.is_finite()) {
        return None;
    }
    let schur = nalgebra::Schur::try_new(a.clone(), T::eps(), 10_000)?;
    Some(schur.complex_eigenvalues().iter().cloned().collect())
}

/// Largest real part over the spectrum of `a`.
pub fn spectral_abscissa<T: Scalar>(a: &DMatrix<T>) -> Option<T> {
    let eig = eigenvalues(a)?;
    eig.iter().map(|z| z.re).reduce(|m, x| if x > m { x } else { m })
}

pub fn is_hurwitz<T: Scalar>(a: &DMatrix<T>) -> bool {
    match spectral_abscissa(a) {
        Some(abscissa) => abscissa < -T::of(HURWITZ_MARGIN),
        None => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixNorms<T> {
    pub spectral_norm: T,
    pub min_singular_value: T,
    pub frobenius: T,
}

/// Spectral norm, smallest singular value and Frobenius norm of `m`.
pub fn matrix_norms<T: Scalar>(m: &DMatrix<T>) -> MatrixNorms<T> {
    assert!(m.nrows() > 0 && m.ncols() > 0, "matrix_norms needs a nonempty matrix");
    let sv = singular_values(m);
    let spectral_norm = sv.iter().cloned().fold(T::zero(), |a, b| if b > a { b } else { a });
    let min_singular_value = sv.iter().cloned().fold(spectral_norm, |a, b| if b < a { b } else { a });
    MatrixNorms {
        spectral_norm,
        min_singular_value,
        frobenius: fro(m),
    }
}

pub(crate) fn singular_values<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let svd = nalgebra::SVD::try_new(m.clone(), false, false, T::eps(), 0)
        .expect("SVD without iteration cap converges");
    svd.singular_values.iter().map(|x| x.abs()).collect()
}

pub(crate) fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    singular_values(m).into_iter().fold(T::zero(), |a, b| if b > a { b } else { a })
}

/// PBH test: (A, B) is stabilizable iff rank [A − λI, B] = n for every
/// eigenvalue λ of A with nonnegative real part.
pub fn stabilizability_check<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> bool {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n {
        return false;
    }
    let Some(eig) = eigenvalues(a) else {
        return false;
    };
    let scale = T::one().max(fro(a)).max(fro(b));
    for lambda in eig {
        if lambda.re < -T::of(HURWITZ_MARGIN) * scale {
            continue;
        }
        let m = b.ncols();
        let mut pencil = DMatrix::<Complex<T>>::zeros(n, n + m);
        for i in 0..n {
            for j in 0..n {
                pencil[(i, j)] = Complex::new(a[(i, j)], T::zero());
            }
            pencil[(i, i)] -= lambda;
            for j in 0..m {
                pencil[(i, n + j)] = Complex::new(b[(i, j)], T::zero());
            }
        }
        let svd = nalgebra::SVD::try_new(pencil, false, false, T::eps(), 0)
            .expect("SVD without iteration cap converges");
        let threshold = T::of(1e-9) * scale;
        let rank = svd.singular_values.iter().filter(|s| **s > threshold).count();
        if rank < n {
            return false;
        }
    }
    true
}
