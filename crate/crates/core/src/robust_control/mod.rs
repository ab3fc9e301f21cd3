//! Dense small-matrix robust control: Lyapunov and Riccati solvers, H∞
//! state-feedback synthesis with attenuation-level bisection, and the
//! stability predicates they rely on.
//!
//! All routines target plants with a handful of states (n ≤ 8); the Lyapunov
//! solver forms the full n²×n² Kronecker system.

mod hinf;
mod io;
mod linalg;
mod lyapunov;
mod riccati;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::Scalar;

pub use hinf::{synthesize_hinf, HInfController, DEFAULT_BISECTION_TOL, MAX_BISECTION_ITERS};
pub use io::{ControllerReport, PlantSpec};
pub use linalg::{
    eigenvalues, is_hurwitz, matrix_norms, spectral_abscissa, stabilizability_check, MatrixNorms,
    HURWITZ_MARGIN,
};
pub use lyapunov::solve_lyapunov;
pub use riccati::{care_residual, solve_care, RiccatiSolution};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("matrix is not Hurwitz (spectral abscissa {abscissa})")]
    NotHurwitz { abscissa: f64 },
    #[error("Kronecker system is numerically singular")]
    SingularSystem,
    #[error("no stabilizing Riccati solution at gamma = {gamma}: {reason}")]
    NoStabilizingSolution { gamma: f64, reason: String },
    #[error("(A, B2) is not stabilizable")]
    NotStabilizable,
    #[error("upper end of gamma bracket ({hi}) is infeasible")]
    InfeasibleBracket { hi: f64 },
    #[error("inconsistent shapes: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("eigenvalue computation did not converge")]
    EigenFailure,
}

impl ControlError {
    /// Stable error-code name, used by the command line for exit reporting.
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::NotHurwitz { .. } => "NotHurwitz",
            ControlError::SingularSystem => "SingularSystem",
            ControlError::NoStabilizingSolution { .. } => "NoStabilizingSolution",
            ControlError::NotStabilizable => "NotStabilizable",
            ControlError::InfeasibleBracket { .. } => "InfeasibleBracket",
            ControlError::Shape(_) => "ShapeMismatch",
            ControlError::InvalidInput(_) => "InvalidInput",
            ControlError::EigenFailure => "EigenFailure",
        }
    }
}

/// Linearized known model: ṡ = A s + B1 w + B2 a, z = C1 s.
///
/// `w` is the disturbance input and `z` the controlled output. Stabilizability of
/// (A, B2) is checked at synthesis time, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant<T: Scalar> {
    pub a: DMatrix<T>,
    pub b1: DMatrix<T>,
    pub b2: DMatrix<T>,
    pub c1: DMatrix<T>,
}

impl<T: Scalar> LinearPlant<T> {
    pub fn new(
        a: DMatrix<T>,
        b1: DMatrix<T>,
        b2: DMatrix<T>,
        c1: DMatrix<T>,
    ) -> Result<Self, ControlError> {
        let n = a.nrows();
        if n == 0 {
            return Err(ControlError::Shape("state dimension must be at least 1".into()));
        }
        if a.ncols() != n {
            return Err(ControlError::Shape(format!("A is {}x{}, expected square", n, a.ncols())));
        }
        if b1.nrows() != n || b1.ncols() == 0 {
            return Err(ControlError::Shape(format!("B1 is {}x{}, expected {n}xm1", b1.nrows(), b1.ncols())));
        }
        if b2.nrows() != n || b2.ncols() == 0 {
            return Err(ControlError::Shape(format!("B2 is {}x{}, expected {n}xm2", b2.nrows(), b2.ncols())));
        }
        if c1.ncols() != n || c1.nrows() == 0 {
            return Err(ControlError::Shape(format!("C1 is {}x{}, expected p1x{n}", c1.nrows(), c1.ncols())));
        }
        let finite = |m: &DMatrix<T>| m.iter().all(|x| x.is_finite());
        if !(finite(&a) && finite(&b1) && finite(&b2) && finite(&c1)) {
            return Err(ControlError::InvalidInput("plant matrices must be finite".into()));
        }
        Ok(Self { a, b1, b2, c1 })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b2.ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.b1.ncols()
    }
}

/// Frobenius norm.
pub(crate) fn fro<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

pub(crate) fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::of(0.5)
}

/// Tolerance stated for f64, widened for lower-precision scalars.
pub(crate) fn tol<T: Scalar>(x: f64) -> T {
    let ratio = (T::eps().to_f64_lossy() / f64::EPSILON).sqrt();
    T::of(x * ratio)
}
