//! Synthetic replacements for recorded car-following data.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::carfollow::{CONTROLLED_CAR, N_CARS};
use super::EnvError;

pub const VELOCITY_RANGE: (f64, f64) = (0.0, 30.0);
pub const ACCEL_RANGE: (f64, f64) = (-3.0, 2.0);
pub const INITIAL_GAP_RANGE: (f64, f64) = (8.0, 25.0);

const BASE_VELOCITY: (f64, f64) = (8.0, 18.0);
const SEGMENT_SECONDS: (f64, f64) = (1.0, 3.0);
const BASE_ACCEL: (f64, f64) = (-1.2, 0.8);
const CAR_ACCEL_JITTER: f64 = 0.25;
const INITIAL_VELOCITY_JITTER: f64 = 0.5;

/// Positions and velocities of all cars at one instant. The controlled car's
/// entries are only meaningful in the first row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub s: [f64; N_CARS],
    pub v: [f64; N_CARS],
}

/// Replayed motion of the non-controlled cars, one row per simulator step
/// (`steps + 1` rows including t = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderTrace {
    pub dt: f64,
    pub rows: Vec<TraceRow>,
}

/// Piecewise-constant acceleration schedule sampled at `dt`.
fn accel_schedule(rng: &mut ChaCha8Rng, steps: usize, dt: f64, range: (f64, f64)) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let len = (rng.gen_range(SEGMENT_SECONDS.0..SEGMENT_SECONDS.1) / dt).round().max(1.0) as usize;
        let a = rng.gen_range(range.0..range.1);
        out.extend(std::iter::repeat(a).take(len));
    }
    out.truncate(steps);
    out
}

/// Deterministic trace for `steps` steps of length `dt`.
///
/// Every car follows a shared base acceleration profile plus its own small
/// piecewise-constant perturbation, so the platoon moves coherently.
pub fn generate_leader_trace(seed: u64, steps: usize, dt: f64) -> LeaderTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v0 = rng.gen_range(BASE_VELOCITY.0..BASE_VELOCITY.1);
    let base = accel_schedule(&mut rng, steps, dt, BASE_ACCEL);

    let mut s = [0.0; N_CARS];
    let mut v = [0.0; N_CARS];
    for car in 1..N_CARS {
        s[car] = s[car - 1] - rng.gen_range(INITIAL_GAP_RANGE.0..INITIAL_GAP_RANGE.1);
    }
    for vi in v.iter_mut() {
        *vi = v0 + rng.gen_range(-INITIAL_VELOCITY_JITTER..INITIAL_VELOCITY_JITTER);
    }
    let jitter: Vec<Vec<f64>> = (0..N_CARS)
        .map(|_| accel_schedule(&mut rng, steps, dt, (-CAR_ACCEL_JITTER, CAR_ACCEL_JITTER)))
        .collect();

    let mut rows = Vec::with_capacity(steps + 1);
    rows.push(TraceRow { t: 0.0, s, v });
    for k in 0..steps {
        for car in (0..N_CARS).filter(|&c| c != CONTROLLED_CAR) {
            let a = (base[k] + jitter[car][k]).clamp(ACCEL_RANGE.0, ACCEL_RANGE.1);
            let v_next = (v[car] + a * dt).clamp(VELOCITY_RANGE.0, VELOCITY_RANGE.1);
            // realized acceleration is constant over the step
            s[car] += 0.5 * (v[car] + v_next) * dt;
            v[car] = v_next;
        }
        rows.push(TraceRow { t: (k + 1) as f64 * dt, s, v });
    }
    LeaderTrace { dt, rows }
}

impl LeaderTrace {
    pub fn steps(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    /// Checks velocity, acceleration and initial-gap ranges, returning the
    /// first violation found.
    pub fn check_constraints(&self) -> Result<(), EnvError> {
        let tol = 1e-9;
        let first = self.rows.first().ok_or_else(|| EnvError::Trace("empty trace".into()))?;
        for car in 1..N_CARS {
            let gap = first.s[car - 1] - first.s[car];
            if gap < INITIAL_GAP_RANGE.0 - tol || gap > INITIAL_GAP_RANGE.1 + tol {
                return Err(EnvError::Trace(format!("initial gap {gap} behind car {}", car - 1)));
            }
        }
        for (k, row) in self.rows.iter().enumerate() {
            for car in (0..N_CARS).filter(|&c| c != CONTROLLED_CAR || k == 0) {
                let v = row.v[car];
                if !(VELOCITY_RANGE.0 - tol..=VELOCITY_RANGE.1 + tol).contains(&v) {
                    return Err(EnvError::Trace(format!("velocity {v} of car {car} at row {k}")));
                }
                if k > 0 && car != CONTROLLED_CAR {
                    let a = (v - self.rows[k - 1].v[car]) / self.dt;
                    if !(ACCEL_RANGE.0 - tol..=ACCEL_RANGE.1 + tol).contains(&a) {
                        return Err(EnvError::Trace(format!("acceleration {a} of car {car} at row {k}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV with columns `t, s0, v0, ..., s4, v4`. The controlled car's
    /// columns hold its initial condition in the first row and are blank after.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EnvError> {
        let err = |e: csv::Error| EnvError::Trace(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        for car in 0..N_CARS {
            header.push(format!("s{car}"));
            header.push(format!("v{car}"));
        }
        w.write_record(&header).map_err(err)?;
        for (k, row) in self.rows.iter().enumerate() {
            let mut rec = vec![format!("{:.17e}", row.t)];
            for car in 0..N_CARS {
                if car == CONTROLLED_CAR && k > 0 {
                    rec.push(String::new());
                    rec.push(String::new());
                } else {
                    rec.push(format!("{:.17e}", row.s[car]));
                    rec.push(format!("{:.17e}", row.v[car]));
                }
            }
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| EnvError::Trace(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, EnvError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| EnvError::Trace(e.to_string()))?;
            if rec.len() != 1 + 2 * N_CARS {
                return Err(EnvError::Trace(format!("row {k} has {} columns", rec.len())));
            }
            let field = |i: usize| -> Result<f64, EnvError> {
                let raw = rec[i].trim();
                if raw.is_empty() {
                    return Ok(f64::NAN);
                }
                raw.parse::<f64>()
                    .map_err(|e| EnvError::Trace(format!("row {k} column {i}: {e}")))
            };
            let mut row = TraceRow { t: field(0)?, s: [0.0; N_CARS], v: [0.0; N_CARS] };
            for car in 0..N_CARS {
                row.s[car] = field(1 + 2 * car)?;
                row.v[car] = field(2 + 2 * car)?;
                let required = car != CONTROLLED_CAR || k == 0;
                if required && !(row.s[car].is_finite() && row.v[car].is_finite()) {
                    return Err(EnvError::Trace(format!("row {k}: missing or non-finite value for car {car}")));
                }
            }
            rows.push(row);
        }
        if rows.len() < 2 {
            return Err(EnvError::Trace("trace needs at least two rows".into()));
        }
        let dt = rows[1].t - rows[0].t;
        if !(dt > 0.0) {
            return Err(EnvError::Trace("time column must be increasing".into()));
        }
        Ok(Self { dt, rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let f = std::fs::File::create(path).map_err(|e| EnvError::Trace(e.to_string()))?;
        self.write_csv(f)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let f = std::fs::File::open(path).map_err(|e| EnvError::Trace(e.to_string()))?;
        Self::read_csv(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_trace() {
        let a = generate_leader_trace(7, 100, 0.1);
        let b = generate_leader_trace(7, 100, 0.1);
        assert_eq!(a, b);
        assert_ne!(generate_leader_trace(0, 100, 0.1), generate_leader_trace(1, 100, 0.1));
    }

    #[test]
    fn constraints_hold_for_many_seeds() {
        for seed in 0..200 {
            let tr = generate_leader_trace(seed, 100, 0.1);
            assert_eq!(tr.rows.len(), 101);
            tr.check_constraints().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn csv_round_trip() {
        let tr = generate_leader_trace(3, 20, 0.1);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = LeaderTrace::read_csv(buf.as_slice()).unwrap();
        assert!((back.dt - tr.dt).abs() < 1e-15);
        for (a, b) in tr.rows.iter().zip(&back.rows) {
            for car in (0..N_CARS).filter(|&c| c != CONTROLLED_CAR) {
                assert_eq!(a.s[car], b.s[car]);
                assert_eq!(a.v[car], b.v[car]);
            }
        }
        assert_eq!(back.rows[0].s[CONTROLLED_CAR], tr.rows[0].s[CONTROLLED_CAR]);
    }

    #[test]
    fn csv_missing_value_rejected() {
        let text = "t,s0,v0,s1,v1,s2,v2,s3,v3,s4,v4\n0,40,10,30,10,20,10,10,10,0,10\n0.1,41,10,,10,21,10,,,1,10\n";
        assert!(LeaderTrace::read_csv(text.as_bytes()).is_err());
    }
}
