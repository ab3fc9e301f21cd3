use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ControlError, HInfController, LinearPlant};
use crate::Scalar;

/// On-disk plant description: row-major nested arrays.
///
/// ```toml
/// a  = [[0.0]]
/// b1 = [[1.0]]
/// b2 = [[1.0]]
/// c1 = [[1.0]]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub a: Vec<Vec<f64>>,
    pub b1: Vec<Vec<f64>>,
    pub b2: Vec<Vec<f64>>,
    pub c1: Vec<Vec<f64>>,
}

impl PlantSpec {
    pub fn from_plant<T: Scalar>(plant: &LinearPlant<T>) -> Self {
        Self {
            a: to_rows(&plant.a),
            b1: to_rows(&plant.b1),
            b2: to_rows(&plant.b2),
            c1: to_rows(&plant.c1),
        }
    }

    pub fn to_plant<T: Scalar>(&self) -> Result<LinearPlant<T>, ControlError> {
        LinearPlant::new(
            from_rows("a", &self.a)?,
            from_rows("b1", &self.b1)?,
            from_rows("b2", &self.b2)?,
            from_rows("c1", &self.c1)?,
        )
    }
}

pub(crate) fn to_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.to_f64_lossy()).collect())
        .collect()
}

pub(crate) fn from_rows<T: Scalar>(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<T>, ControlError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(ControlError::Shape(format!("{name} is empty")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(ControlError::Shape(format!("{name} has ragged rows")));
    }
    let data: Vec<T> = rows.iter().flatten().map(|&x| T::of(x)).collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &data))
}

/// JSON view of a synthesized controller: `{K, P, zeta}` plus a closed-loop check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub zeta: f64,
    pub closed_loop_hurwitz: bool,
}

impl ControllerReport {
    pub fn new<T: Scalar>(plant: &LinearPlant<T>, ctrl: &HInfController<T>) -> Self {
        Self {
            k: to_rows(&ctrl.k),
            p: to_rows(&ctrl.p),
            zeta: ctrl.zeta.to_f64_lossy(),
            closed_loop_hurwitz: ctrl.closed_loop_hurwitz(plant),
        }
    }
}
