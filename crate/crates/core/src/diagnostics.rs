//! Numerical checks of the mixing layer's analytic properties: the closed-form
//! argmin, the variance factor, total-variation bias bounds, and across-seed
//! reward statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::core_rl::mix_means;
use crate::rng::{standard_normal, SimRng};

/// Default smoothing of the deterministic prior, as a fraction of the action range.
pub const DEFAULT_PRIOR_SMOOTHING: f64 = 0.05;
/// Integration window half-width in combined standard deviations.
pub const TV_WINDOW_STDS: f64 = 12.0;
const TV_TAIL_WARNING: f64 = 1e-8;
const TV_QUAD_TOL: f64 = 1e-10;
const LEMMA1_GRAD_TOL: f64 = 1e-12;
pub const VARIANCE_FACTOR_RTOL: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("runs are misaligned: {0}")]
    MisalignedRuns(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl DiagnosticsError {
    pub fn code(&self) -> &'static str {
        match self {
            DiagnosticsError::MisalignedRuns(_) => "MisalignedRuns",
            DiagnosticsError::InvalidInput(_) => "InvalidInput",
        }
    }
}

/// Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self, DiagnosticsError> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(DiagnosticsError::InvalidInput("mean and variance must be nonempty and equal length".into()));
        }
        if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(DiagnosticsError::InvalidInput("variances must be positive and all entries finite".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn scalar(mean: f64, std: f64) -> Result<Self, DiagnosticsError> {
        Self::new(vec![mean], vec![std * std])
    }

    fn as_1d(&self) -> Result<Mixture1D, DiagnosticsError> {
        if self.mean.len() != 1 {
            return Err(DiagnosticsError::InvalidInput("total variation is computed for 1-D densities only".into()));
        }
        Ok(Mixture1D::gaussian(self.mean[0], self.var[0].sqrt()))
    }
}

/// Finite Gaussian mixture on the real line; a single Gaussian is a
/// one-component mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture1D {
    /// (weight, mean, std)
    pub components: Vec<(f64, f64, f64)>,
}

impl Mixture1D {
    pub fn gaussian(mean: f64, std: f64) -> Self {
        Self { components: vec![(1.0, mean, std)] }
    }

    /// w·p + (1 − w)·q
    pub fn blend(w: f64, p: &Mixture1D, q: &Mixture1D) -> Self {
        let mut components: Vec<_> = p.components.iter().map(|&(a, m, s)| (w * a, m, s)).collect();
        components.extend(q.components.iter().map(|&(a, m, s)| ((1.0 - w) * a, m, s)));
        Self { components }
    }

    fn validate(&self) -> Result<(), DiagnosticsError> {
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        let ok = !self.components.is_empty()
            && self.components.iter().all(|&(w, m, s)| w >= 0.0 && m.is_finite() && s > 0.0 && s.is_finite())
            && (total - 1.0).abs() < 1e-12;
        if ok {
            Ok(())
        } else {
            Err(DiagnosticsError::InvalidInput("mixture needs nonnegative weights summing to 1 and positive stds".into()))
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .filter(|c| c.0 > 0.0)
            .map(|&(w, m, s)| w * Normal::new(m, s).expect("validated").pdf(x))
            .sum()
    }

    /// Probability mass outside [lo, hi].
    pub fn tail_mass(&self, lo: f64, hi: f64) -> f64 {
        self.components
            .iter()
            .filter(|c| c.0 > 0.0)
            .map(|&(w, m, s)| {
                let n = Normal::new(m, s).expect("validated");
                w * (n.cdf(lo) + n.sf(hi))
            })
            .sum()
    }

    fn window(&self) -> (f64, f64) {
        let lo = self.components.iter().map(|&(_, m, s)| m - TV_WINDOW_STDS * s).fold(f64::INFINITY, f64::min);
        let hi = self.components.iter().map(|&(_, m, s)| m + TV_WINDOW_STDS * s).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvResult {
    pub value: f64,
    /// Combined mass of both densities outside the integration window.
    pub tail_mass: f64,
    /// Set when `tail_mass` is large enough to matter.
    pub truncation_warning: bool,
}

/// (1/2)∫|p − q| by adaptive Gauss–Kronrod quadrature over the union of the
/// ±12σ windows of all components.
pub fn tv_distance(p: &Mixture1D, q: &Mixture1D) -> Result<TvResult, DiagnosticsError> {
    p.validate()?;
    q.validate()?;
    let (lo_p, hi_p) = p.window();
    let (lo_q, hi_q) = q.window();
    let (lo, hi) = (lo_p.min(lo_q), hi_p.max(hi_q));
    let f = |x: f64| (p.pdf(x) - q.pdf(x)).abs();
    // Split at component means so narrow peaks are never straddled by one panel.
    let mut knots: Vec<f64> = p.components.iter().chain(&q.components).map(|c| c.1).collect();
    knots.push(lo);
    knots.push(hi);
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup();
    let integral: f64 = knots.windows(2).map(|w| adaptive_gk(&f, w[0], w[1], TV_QUAD_TOL, 50)).sum();
    let tail_mass = p.tail_mass(lo, hi) + q.tail_mass(lo, hi);
    Ok(TvResult {
        value: (0.5 * integral).clamp(0.0, 1.0),
        tail_mass,
        truncation_warning: tail_mass > TV_TAIL_WARNING,
    })
}

pub fn tv_distance_gaussian(p: &GaussianSpec, q: &GaussianSpec) -> Result<TvResult, DiagnosticsError> {
    tv_distance(&p.as_1d()?, &q.as_1d()?)
}

const GK_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const GK_KRONROD: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GK_GAUSS: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// 15-point Kronrod estimate and its difference from the embedded 7-point
/// Gauss rule.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = GK_KRONROD[7] * fc;
    let mut gauss = GK_GAUSS[3] * fc;
    for i in 0..7 {
        let y = f(c - h * GK_NODES[i]) + f(c + h * GK_NODES[i]);
        kronrod += GK_KRONROD[i] * y;
        if i % 2 == 1 {
            gauss += GK_GAUSS[i / 2] * y;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

fn adaptive_gk(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (value, err) = gk15(f, a, b);
    if err <= tol || depth == 0 || (b - a).abs() < 1e-12 {
        return value;
    }
    let m = 0.5 * (a + b);
    adaptive_gk(f, a, m, 0.5 * tol, depth - 1) + adaptive_gk(f, m, b, 0.5 * tol, depth - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Check {
    pub closed_form: Vec<f64>,
    pub numeric_argmin: Vec<f64>,
    pub gap: f64,
    pub iterations: usize,
}

/// Compares the closed-form mixed mean with a gradient-descent minimizer of
/// ‖u − ū‖²_W + λ‖u − u_prior‖²_W, W = Σ⁻¹.
pub fn lemma1_argmin_check(
    u_rl_mean: &[f64],
    u_prior: &[f64],
    lambda: f64,
    sigma: &[f64],
) -> Result<Lemma1Check, DiagnosticsError> {
    let n = u_rl_mean.len();
    if u_prior.len() != n || sigma.len() != n || n == 0 {
        return Err(DiagnosticsError::InvalidInput("dimension mismatch".into()));
    }
    if !(lambda >= 0.0) || sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(DiagnosticsError::InvalidInput("need λ ≥ 0 and Σ > 0".into()));
    }
    let closed_form = mix_means(u_rl_mean, u_prior, lambda).map_err(|e| DiagnosticsError::InvalidInput(e.to_string()))?;

    let w: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
    let lipschitz = 2.0 * (1.0 + lambda) * w.iter().cloned().fold(0.0, f64::max);
    let step = 1.0 / lipschitz;
    let mut u = vec![0.0; n];
    let mut iterations = 0;
    loop {
        let grad: Vec<f64> = (0..n)
            .map(|i| 2.0 * w[i] * ((u[i] - u_rl_mean[i]) + lambda * (u[i] - u_prior[i])))
            .collect();
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= LEMMA1_GRAD_TOL || iterations >= 10_000_000 {
            break;
        }
        for i in 0..n {
            u[i] -= step * grad[i];
        }
        iterations += 1;
    }
    let gap = closed_form.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Lemma1Check {
        closed_form,
        numeric_argmin: u,
        gap,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFactorCheck {
    pub empirical_ratio: f64,
    pub expected: f64,
    pub passed: bool,
}

/// Monte-Carlo variance of the mixed action relative to the RL action's
/// known variance, averaged over dimensions. `mixing_exponent` replaces the
/// mixing weight 1/(1+λ) by (1+λ)^−e; anything other than 1 is a deliberate
/// mutation used to show that the check can fail.
pub fn variance_factor_check(
    sigma: &[f64],
    lambda: f64,
    n_samples: usize,
    rng: &mut SimRng,
    mixing_exponent: f64,
) -> Result<VarianceFactorCheck, DiagnosticsError> {
    if n_samples < 100_000 {
        return Err(DiagnosticsError::InvalidInput(format!("need at least 1e5 samples, got {n_samples}")));
    }
    if sigma.is_empty() || sigma.iter().any(|&s| !(s > 0.0)) || !(lambda >= 0.0) {
        return Err(DiagnosticsError::InvalidInput("need Σ > 0 and λ ≥ 0".into()));
    }
    let w = (1.0 + lambda).powf(-mixing_exponent);
    let mut ratio = 0.0;
    for &var in sigma {
        let mean: f64 = rng.gen_range(-1.0..1.0);
        let prior: f64 = rng.gen_range(-1.0..1.0);
        let std = var.sqrt();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n_samples {
            let a = mean + std * standard_normal(rng);
            let u = w * a + (1.0 - w) * prior;
            sum += u;
            sum_sq += u * u;
        }
        let n = n_samples as f64;
        let emp = (sum_sq - sum * sum / n) / (n - 1.0);
        ratio += emp / var;
    }
    let empirical_ratio = ratio / sigma.len() as f64;
    let expected = (1.0 + lambda).powi(-2);
    Ok(VarianceFactorCheck {
        empirical_ratio,
        expected,
        passed: (empirical_ratio - expected).abs() <= VARIANCE_FACTOR_RTOL * expected,
    })
}

/// Deterministic prior action smoothed into a Gaussian.
pub fn smoothed_prior(u_prior: f64, action_range: f64, smoothing: f64) -> Result<GaussianSpec, DiagnosticsError> {
    GaussianSpec::scalar(u_prior, smoothing * action_range)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub lambda: f64,
    pub d_sub: f64,
    /// TV(π_k, π_opt) with π_k the density mixture of π_opt and π_prior.
    pub mixture_tv: f64,
    /// λ/(1+λ)·D_sub, the limiting upper bound.
    pub upper_bound: f64,
    /// D_sub − TV(π_opt, π_prior)/(1+λ), the lower bound at convergence.
    pub lower_bound: f64,
    pub identity_error: f64,
    pub identity_holds: bool,
    pub lower_bound_holds: bool,
    /// TV(π_k, π_opt) with π_k the law of the averaged action; reported only.
    pub averaging_tv: f64,
    pub truncation_warning: bool,
}

pub const THEOREM1_TOL: f64 = 1e-4;

/// Evaluates the bias bounds at convergence (π_θ = π_opt) for 1-D Gaussians.
pub fn theorem1_bounds_check(
    pi_opt: &GaussianSpec,
    pi_prior: &GaussianSpec,
    lambda: f64,
) -> Result<Theorem1Report, DiagnosticsError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(DiagnosticsError::InvalidInput(format!("λ must be finite and ≥ 0, got {lambda}")));
    }
    let opt = pi_opt.as_1d()?;
    let prior = pi_prior.as_1d()?;
    let w = 1.0 / (1.0 + lambda);
    let d_sub = tv_distance(&opt, &prior)?;
    let mixture = Mixture1D::blend(w, &opt, &prior);
    let mixture_tv = tv_distance(&mixture, &opt)?;

    let (mo, vo) = (pi_opt.mean[0], pi_opt.var[0]);
    let (mp, vp) = (pi_prior.mean[0], pi_prior.var[0]);
    let averaged = Mixture1D::gaussian(w * mo + lambda * w * mp, w * (vo + lambda * lambda * vp).sqrt());
    let averaging_tv = tv_distance(&averaged, &opt)?;

    let upper_bound = lambda * w * d_sub.value;
    let lower_bound = d_sub.value - w * d_sub.value;
    let identity_error = (mixture_tv.value - upper_bound).abs();
    Ok(Theorem1Report {
        lambda,
        d_sub: d_sub.value,
        mixture_tv: mixture_tv.value,
        upper_bound,
        lower_bound,
        identity_error,
        identity_holds: identity_error <= THEOREM1_TOL,
        lower_bound_holds: mixture_tv.value >= lower_bound - THEOREM1_TOL,
        averaging_tv: averaging_tv.value,
        truncation_warning: d_sub.truncation_warning || mixture_tv.truncation_warning || averaging_tv.truncation_warning,
    })
}

/// Per-episode across-seed statistics of episode rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEnsembleStats {
    pub mean_reward: Vec<f64>,
    /// Unbiased (n − 1) variance across seeds.
    pub var_reward: Vec<f64>,
    pub n_seeds: usize,
    /// Average over episodes of `var_reward`.
    pub mean_variance: f64,
    /// Mean over seeds and the final (up to) ten episodes.
    pub final_mean_reward: f64,
    /// Unbiased variance across seeds of each seed's final-ten mean.
    pub final_var_reward: f64,
}

pub const FINAL_WINDOW: usize = 10;

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// `runs[seed][episode]` rewards; all runs must have the same length.
pub fn ensemble_stats(runs: &[Vec<f64>]) -> Result<SeedEnsembleStats, DiagnosticsError> {
    if runs.len() < 2 {
        return Err(DiagnosticsError::MisalignedRuns(format!("need at least 2 seeds, got {}", runs.len())));
    }
    let episodes = runs[0].len();
    if episodes == 0 || runs.iter().any(|r| r.len() != episodes) {
        return Err(DiagnosticsError::MisalignedRuns(format!(
            "episode counts differ or are zero: {:?}",
            runs.iter().map(|r| r.len()).collect::<Vec<_>>()
        )));
    }
    let (mean_reward, var_reward): (Vec<f64>, Vec<f64>) = (0..episodes)
        .map(|e| mean_var(&runs.iter().map(|r| r[e]).collect::<Vec<_>>()))
        .unzip();
    let mean_variance = var_reward.iter().sum::<f64>() / episodes as f64;
    let start = episodes.saturating_sub(FINAL_WINDOW);
    let finals: Vec<f64> = runs
        .iter()
        .map(|r| r[start..].iter().sum::<f64>() / (episodes - start) as f64)
        .collect();
    let (final_mean_reward, final_var_reward) = mean_var(&finals);
    Ok(SeedEnsembleStats {
        mean_reward,
        var_reward,
        n_seeds: runs.len(),
        mean_variance,
        final_mean_reward,
        final_var_reward,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    pub seed: u64,
    pub variance_samples: usize,
    pub lemma1_instances: usize,
    pub tv_triples: usize,
    pub mixing_exponent: f64,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            variance_samples: 1_000_000,
            lemma1_instances: 100,
            tv_triples: 20,
            mixing_exponent: 1.0,
        }
    }
}

pub const LEMMA1_GAP_TOL: f64 = 1e-10;
pub const TV_PROPERTY_TOL: f64 = 3e-5;

fn to_json<S: Serialize>(x: &S) -> serde_json::Value {
    serde_json::to_value(x).expect("diagnostic values serialize")
}

/// Runs the mixing-argmin, variance-factor, mixture-TV and TV property suites.
pub fn run_diagnostics(opts: &DiagnoseOptions) -> Result<DiagnosticReport, DiagnosticsError> {
    use crate::rng::{child_rng, StreamLabel};
    let mut rng = child_rng(opts.seed, StreamLabel::PolicyNoise);
    let mut checks = Vec::new();

    let mut worst_gap: f64 = 0.0;
    for _ in 0..opts.lemma1_instances {
        let n = rng.gen_range(1..=4);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..10.0)).collect();
        let lambda = rng.gen_range(0.0..20.0);
        worst_gap = worst_gap.max(lemma1_argmin_check(&u, &p, lambda, &s)?.gap);
    }
    checks.push(CheckResult {
        name: "lemma1_argmin".into(),
        passed: worst_gap <= LEMMA1_GAP_TOL,
        details: serde_json::json!({ "instances": opts.lemma1_instances, "max_gap": worst_gap, "tol": LEMMA1_GAP_TOL }),
    });

    for lambda in [0.5, 1.0, 4.0] {
        let r = variance_factor_check(&[1.0], lambda, opts.variance_samples, &mut rng, opts.mixing_exponent)?;
        checks.push(CheckResult {
            name: format!("variance_factor_lambda_{lambda}"),
            passed: r.passed,
            details: to_json(&r),
        });
    }

    let range = 2.0;
    let mut reports = Vec::new();
    for gap in [0.05, 0.2, 1.0] {
        for lambda in [0.5, 1.0, 4.0] {
            let opt = GaussianSpec::scalar(0.0, 0.1)?;
            let prior = smoothed_prior(gap, range, DEFAULT_PRIOR_SMOOTHING)?;
            reports.push(theorem1_bounds_check(&opt, &prior, lambda)?);
        }
    }
    checks.push(CheckResult {
        name: "theorem1_mixture_bounds".into(),
        passed: reports.iter().all(|r| r.identity_holds && r.lower_bound_holds),
        details: to_json(&reports),
    });

    let mut worst_sym: f64 = 0.0;
    let mut worst_tri: f64 = f64::NEG_INFINITY;
    for _ in 0..opts.tv_triples {
        let g: Vec<Mixture1D> = (0..3)
            .map(|_| Mixture1D::gaussian(rng.gen_range(-3.0..3.0), rng.gen_range(0.2..2.0)))
            .collect();
        let ab = tv_distance(&g[0], &g[1])?.value;
        let ba = tv_distance(&g[1], &g[0])?.value;
        let bc = tv_distance(&g[1], &g[2])?.value;
        let ac = tv_distance(&g[0], &g[2])?.value;
        worst_sym = worst_sym.max((ab - ba).abs());
        worst_tri = worst_tri.max(ac - ab - bc);
    }
    checks.push(CheckResult {
        name: "tv_symmetry_triangle".into(),
        passed: worst_sym <= TV_PROPERTY_TOL && worst_tri <= TV_PROPERTY_TOL,
        details: serde_json::json!({ "triples": opts.tv_triples, "max_asymmetry": worst_sym, "max_triangle_violation": worst_tri }),
    });

    let failures: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    Ok(DiagnosticReport {
        passed: failures.is_empty(),
        checks,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{child_rng, StreamLabel};
    use proptest::prelude::*;
    use rand::Rng;

    fn shift_tv(dmu: f64, sigma: f64) -> f64 {
        2.0 * Normal::new(0.0, 1.0).unwrap().cdf(dmu.abs() / (2.0 * sigma)) - 1.0
    }

    #[test]
    fn tv_examples() {
        let n01 = Mixture1D::gaussian(0.0, 1.0);
        assert_eq!(tv_distance(&n01, &n01).unwrap().value, 0.0);
        let r = tv_distance(&n01, &Mixture1D::gaussian(2.0, 1.0)).unwrap();
        assert!((r.value - shift_tv(2.0, 1.0)).abs() < 1e-5);
        assert!((r.value - 0.682689).abs() < 1e-5);
        assert!(!r.truncation_warning);
        let far = tv_distance(&n01, &Mixture1D::gaussian(100.0, 1.0)).unwrap();
        assert!((far.value - 1.0).abs() < 1e-5);
    }

    #[test]
    fn tv_rejects_bad_mixtures() {
        let bad = Mixture1D { components: vec![(0.5, 0.0, 1.0)] };
        assert!(tv_distance(&bad, &Mixture1D::gaussian(0.0, 1.0)).is_err());
    }

    #[test]
    fn argmin_check_examples() {
        let r = lemma1_argmin_check(&[1.0], &[0.0], 1.0, &[1.0]).unwrap();
        assert!((r.closed_form[0] - 0.5).abs() < 1e-15);
        assert!(r.gap <= 1e-10);
        let r = lemma1_argmin_check(&[0.7, -2.0], &[3.0, 1.0], 0.0, &[1.0, 4.0]).unwrap();
        assert_eq!(r.closed_form, vec![0.7, -2.0]);
    }

    #[test]
    fn variance_factor_examples() {
        let mut rng = child_rng(3, StreamLabel::PolicyNoise);
        let r = variance_factor_check(&[1.0], 0.0, 200_000, &mut rng, 1.0).unwrap();
        assert!(r.passed && r.expected == 1.0);
        let r = variance_factor_check(&[2.0, 0.5], 1.0, 200_000, &mut rng, 1.0).unwrap();
        assert!(r.passed, "{r:?}");
        let r = variance_factor_check(&[1.0], 4.0, 200_000, &mut rng, 0.5).unwrap();
        assert!(!r.passed);
        assert!(variance_factor_check(&[1.0], 1.0, 10, &mut rng, 1.0).is_err());
    }

    #[test]
    fn bounds_check_examples() {
        let opt = GaussianSpec::scalar(0.0, 0.1).unwrap();
        let prior = GaussianSpec::scalar(0.3, 0.1).unwrap();
        let r = theorem1_bounds_check(&opt, &prior, 0.0).unwrap();
        assert!(r.mixture_tv.abs() < 1e-9);
        let r = theorem1_bounds_check(&opt, &prior, 1.0).unwrap();
        assert!((r.mixture_tv - r.d_sub / 2.0).abs() < 1e-4);
        assert!((r.d_sub - shift_tv(0.3, 0.1)).abs() < 1e-5);
        let same = theorem1_bounds_check(&opt, &opt, 3.0).unwrap();
        assert!(same.mixture_tv < 1e-9 && same.upper_bound < 1e-9 && same.lower_bound.abs() < 1e-9);
    }

    #[test]
    fn ensemble_examples() {
        let s = ensemble_stats(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(s.var_reward, vec![0.0, 0.0]);
        let s = ensemble_stats(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(s.var_reward, vec![2.0]);
        assert_eq!(s.mean_reward, vec![1.0]);
        assert!(matches!(ensemble_stats(&[vec![0.0], vec![1.0, 2.0]]), Err(DiagnosticsError::MisalignedRuns(_))));
        assert!(ensemble_stats(&[vec![0.0]]).is_err());
    }

    #[test]
    fn ensemble_recovers_known_variance() {
        let mut rng = child_rng(11, StreamLabel::Environment);
        let runs: Vec<Vec<f64>> = (0..400).map(|_| (0..50).map(|_| 3.0 * standard_normal(&mut rng)).collect()).collect();
        let s = ensemble_stats(&runs).unwrap();
        // 50 episodes × 400 seeds: the average variance has relative sd ≈ √(2/399/50) ≈ 1%.
        assert!((s.mean_variance - 9.0).abs() < 0.05 * 9.0, "{}", s.mean_variance);
    }

    #[test]
    fn default_diagnostics_pass_and_mutation_fails() {
        let opts = DiagnoseOptions { variance_samples: 200_000, ..Default::default() };
        let r = run_diagnostics(&opts).unwrap();
        assert!(r.passed, "{:?}", r.failures);
        let bad = run_diagnostics(&DiagnoseOptions { mixing_exponent: 0.5, ..opts }).unwrap();
        assert!(!bad.passed);
        assert!(bad.failures.iter().all(|f| f.starts_with("variance_factor")));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tv_is_a_metric(
            m in proptest::collection::vec(-3.0..3.0f64, 3),
            s in proptest::collection::vec(0.2..2.0f64, 3),
        ) {
            let g: Vec<Mixture1D> = (0..3).map(|i| Mixture1D::gaussian(m[i], s[i])).collect();
            let ab = tv_distance(&g[0], &g[1]).unwrap().value;
            let ba = tv_distance(&g[1], &g[0]).unwrap().value;
            let bc = tv_distance(&g[1], &g[2]).unwrap().value;
            let ac = tv_distance(&g[0], &g[2]).unwrap().value;
            prop_assert!((ab - ba).abs() <= 3e-5);
            prop_assert!(ac <= ab + bc + 3e-5);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn equal_variance_shift_matches_closed_form(dmu in -6.0..6.0f64, sigma in 0.1..3.0f64) {
            let tv = tv_distance(&Mixture1D::gaussian(0.0, sigma), &Mixture1D::gaussian(dmu, sigma)).unwrap().value;
            prop_assert!((tv - shift_tv(dmu, sigma)).abs() <= 1e-5);
        }

        #[test]
        fn mixture_identity(mt in -2.0..2.0f64, st in 0.1..1.0f64, mp in -2.0..2.0f64, sp in 0.1..1.0f64, lambda in 0.0..20.0f64) {
            let theta = Mixture1D::gaussian(mt, st);
            let prior = Mixture1D::gaussian(mp, sp);
            let mix = Mixture1D::blend(1.0 / (1.0 + lambda), &theta, &prior);
            let lhs = tv_distance(&prior, &mix).unwrap().value;
            let rhs = tv_distance(&theta, &prior).unwrap().value / (1.0 + lambda);
            prop_assert!((lhs - rhs).abs() <= 3e-5);
        }

        #[test]
        fn argmin_gap_random(
            u in proptest::collection::vec(-5.0..5.0f64, 1..=4),
            lambda in 0.0..20.0f64,
            seed in 0u64..1000,
        ) {
            let mut rng = child_rng(seed, StreamLabel::Environment);
            let p: Vec<f64> = u.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
            let s: Vec<f64> = u.iter().map(|_| rng.gen_range(0.1..10.0)).collect();
            prop_assert!(lemma1_argmin_check(&u, &p, lambda, &s).unwrap().gap <= 1e-10);
        }
    }
}
