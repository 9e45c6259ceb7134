//! Linearized estimator and error diagnostics.
//!
//! Replacing the log partition by its second-order expansion around the
//! true log density `η0` turns the objective into a quadratic whose
//! minimizer is linear in `k̃`:
//!
//! ```text
//! η̃ − η0 = (λI + V0)⁻¹ ((k̃ − p0) − λη0),      V0 = P0 − p0p0ᵀ
//! ```
//!
//! Its penalized error `(λJ + V)(η̃ − η0)` splits into a bias part bounded by
//! `λ η0ᵀη0` and a variance part with expectation
//! `(1/n) Σ_y ρ_y/(λ + ρ_y) < 1/(nλ)`, where `ρ_y` are the eigenvalues of
//! `V0`.
//!
//! `λI + V0` is a diagonal matrix minus a rank-one term, so every solve here
//! is exact and O(m) via Sherman–Morrison. That is what allows the rate
//! experiment to use very large `m`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::domain::{
    to_composition, weighted_variance, BaseMeasure, Composition, CountVector, LogDensity,
};
use crate::error::{Error, Result};
use crate::rng::{stream, streams};
use crate::sim::sample_multinomial;
use crate::solver::{check_lambda, solve, FitConfig};
use crate::stats::ols_slope;

/// Largest `m` for which [`rate_experiment`] reports the eigenvalues `ρ_y`.
pub const MAX_DENSE_EIGEN: usize = 2000;

/// Known truth for simulations: `p0 = to_composition(η0, w)` with `Σ η0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthSpec {
    pub p0: Composition,
    pub eta0: LogDensity,
    pub w: BaseMeasure,
}

impl TruthSpec {
    pub fn from_composition(p0: Composition, w: BaseMeasure) -> Result<Self> {
        let eta0 = eta_from_composition(&p0, &w)?;
        Ok(Self { p0, eta0, w })
    }

    pub fn from_log_density(eta0: LogDensity, w: BaseMeasure) -> Result<Self> {
        let p0 = to_composition(eta0.as_slice(), &w)?;
        Ok(Self { p0, eta0, w })
    }

    pub fn len(&self) -> usize {
        self.p0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p0.is_empty()
    }
}

/// `η0_y = log(p0_y / w_y) − mean`.
pub fn eta_from_composition(p0: &Composition, w: &BaseMeasure) -> Result<LogDensity> {
    if p0.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: w.len(),
            found: p0.len(),
        });
    }
    LogDensity::centered(
        p0.as_slice()
            .iter()
            .zip(w.as_slice())
            .map(|(p, w)| (p / w).ln())
            .collect(),
    )
}

/// `λI + P − ppᵀ` for a probability vector `p`, kept in factored form.
#[derive(Debug, Clone)]
pub struct RidgeCovariance<'a> {
    p: &'a [f64],
    lambda: f64,
    /// `1 − pᵀD⁻¹p` with `D = diag(λ + p)`, evaluated as `Σ p λ/(λ + p)`.
    schur: f64,
}

impl<'a> RidgeCovariance<'a> {
    pub fn new(p: &'a [f64], lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let schur = p.iter().map(|&py| py * lambda / (lambda + py)).sum();
        Ok(Self { p, lambda, schur })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = b
            .iter()
            .zip(self.p)
            .map(|(bi, pi)| bi / (self.lambda + pi))
            .collect();
        let ptx: f64 = self.p.iter().zip(&x).map(|(a, b)| a * b).sum();
        let scale = ptx / self.schur;
        for (xi, pi) in x.iter_mut().zip(self.p) {
            *xi += scale * pi / (self.lambda + pi);
        }
        x
    }

    /// `xᵀ(λI + P − ppᵀ)x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let ridge: f64 = x.iter().map(|v| v * v).sum();
        self.lambda * ridge + weighted_variance(self.p, x).expect("lengths match")
    }

    /// `tr((λI + V)⁻¹ V) = Σ_y ρ_y / (λ + ρ_y)`.
    pub fn effective_dimension(&self) -> f64 {
        let lam = self.lambda;
        let first: f64 = self.p.iter().map(|&p| p / (lam + p)).sum();
        let second: f64 = self.p.iter().map(|&p| (p / (lam + p)).powi(2)).sum();
        first - lam * second / self.schur
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let m = self.p.len();
        DMatrix::from_fn(m, m, |i, j| {
            let v = -self.p[i] * self.p[j];
            if i == j {
                v + self.p[i] + self.lambda
            } else {
                v
            }
        })
    }
}

/// Minimizer of the quadratic approximation around the truth.
pub fn linearized_estimate(k_tilde: &[f64], truth: &TruthSpec, lambda: f64) -> Result<Vec<f64>> {
    if k_tilde.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: k_tilde.len(),
        });
    }
    let a = RidgeCovariance::new(truth.p0.as_slice(), lambda)?;
    let eta0 = truth.eta0.as_slice();
    let rhs: Vec<f64> = k_tilde
        .iter()
        .zip(truth.p0.as_slice())
        .zip(eta0)
        .map(|((k, p), e)| (k - p) - lambda * e)
        .collect();
    Ok(a.solve(&rhs)
        .into_iter()
        .zip(eta0)
        .map(|(d, e)| e + d)
        .collect())
}

/// `(η − η0)ᵀ(λI + P0 − p0p0ᵀ)(η − η0) = λJ(η − η0) + V(η − η0)`.
pub fn penalized_error(truth: &TruthSpec, eta: &[f64], lambda: f64) -> Result<f64> {
    if eta.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: eta.len(),
        });
    }
    let diff: Vec<f64> = eta
        .iter()
        .zip(truth.eta0.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    Ok(RidgeCovariance::new(truth.p0.as_slice(), lambda)?.quadratic_form(&diff))
}

/// Eigenvalues of `P − ppᵀ`, ascending. Dense; intended for moderate `m`.
pub fn covariance_eigenvalues(p: &Composition) -> Vec<f64> {
    let p = p.as_slice();
    let m = p.len();
    let v = DMatrix::from_fn(m, m, |i, j| {
        let o = -p[i] * p[j];
        if i == j {
            o + p[i]
        } else {
            o
        }
    });
    let mut rho: Vec<f64> = SymmetricEigen::new(v)
        .eigenvalues
        .iter()
        // PSD matrix; negatives are rounding.
        .map(|r| r.max(0.0))
        .collect();
    rho.sort_by(f64::total_cmp);
    rho
}

/// Exact expected variance part: `(1/n) Σ ρ_y/(λ + ρ_y)`.
pub fn variance_term(p0: &Composition, n: f64, lambda: f64) -> Result<f64> {
    Ok(RidgeCovariance::new(p0.as_slice(), lambda)?.effective_dimension() / n)
}

/// Exact bias part: `λ² η0ᵀ(λI + V0)⁻¹η0`.
pub fn bias_term(truth: &TruthSpec, lambda: f64) -> Result<f64> {
    let a = RidgeCovariance::new(truth.p0.as_slice(), lambda)?;
    let eta0 = truth.eta0.as_slice();
    let x = a.solve(eta0);
    Ok(lambda * lambda * eta0.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub n: u64,
    pub lambda: f64,
}

/// Every `(n, λ)` combination.
pub fn grid_points(n_values: &[u64], lambda_values: &[f64]) -> Vec<RatePoint> {
    n_values
        .iter()
        .flat_map(|&n| {
            lambda_values
                .iter()
                .map(move |&lambda| RatePoint { n, lambda })
        })
        .collect()
}

/// `λ_n = (m n)^{−1/2}` for each `n`.
pub fn optimal_rate_points(m: usize, n_values: &[u64]) -> Vec<RatePoint> {
    n_values
        .iter()
        .map(|&n| RatePoint {
            n,
            lambda: (m as f64 * n as f64).powf(-0.5),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRecord {
    pub n: u64,
    pub lambda: f64,
    pub replications: usize,
    /// Monte Carlo mean of `(λJ + V)(η̃ − η0)`.
    pub mc_mean: f64,
    pub mc_std_error: f64,
    pub bias_exact: f64,
    pub variance_exact: f64,
    /// `bias_exact + variance_exact`, the exact expectation.
    pub expected_exact: f64,
    /// `λ η0ᵀη0`.
    pub bias_bound: f64,
    /// `1/(nλ)`.
    pub variance_bound: f64,
    pub mc_to_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub m: usize,
    pub seed: u64,
    pub eta0_squared_norm: f64,
    /// Eigenvalues of `P0 − p0p0ᵀ`, when `m ≤ MAX_DENSE_EIGEN`.
    pub rho: Option<Vec<f64>>,
    /// `Σ ρ_y = 1 − Σ p0_y²`.
    pub rho_sum: f64,
    pub records: Vec<RateRecord>,
    /// Least-squares `(c_b, c_v)` in `mc_mean ≈ c_b λη0ᵀη0 + c_v/(nλ)`.
    pub fitted_constants: Option<(f64, f64)>,
    /// Slope of `log mc_mean` on `log n`, when each `n` appears once.
    pub mc_slope_vs_n: Option<f64>,
    /// Same slope for the exact expectation.
    pub exact_slope_vs_n: Option<f64>,
}

/// Monte Carlo and exact evaluation of the linearized estimator's error.
/// Replication `r` of point `i` draws from its own random stream, so results
/// do not depend on thread scheduling.
pub fn rate_experiment(
    truth: &TruthSpec,
    points: &[RatePoint],
    replications: usize,
    seed: u64,
) -> Result<RateReport> {
    if points.is_empty() || replications == 0 {
        return Err(Error::InvalidConfig(
            "rate experiment needs at least one point and one replication".into(),
        ));
    }
    for point in points {
        check_lambda(point.lambda)?;
        if point.n == 0 {
            return Err(Error::InvalidConfig(
                "sample sizes must be at least 1".into(),
            ));
        }
    }
    let m = truth.len();
    let eta0_sq = truth.eta0.squared_norm();

    let records = points
        .iter()
        .enumerate()
        .map(|(i, point)| {
            let errors: Vec<f64> = (0..replications)
                .into_par_iter()
                .map(|r| {
                    let mut rng = stream(
                        seed,
                        streams::RATE_REPLICATIONS + ((i as u64) << 32) + r as u64,
                    );
                    let k = sample_multinomial(&truth.p0, point.n, &mut rng)?;
                    let n = point.n as f64;
                    let k_tilde: Vec<f64> = k.as_slice().iter().map(|c| c / n).collect();
                    let eta = linearized_estimate(&k_tilde, truth, point.lambda)?;
                    penalized_error(truth, &eta, point.lambda)
                })
                .collect::<Result<_>>()?;
            let reps = errors.len() as f64;
            let mc_mean = errors.iter().sum::<f64>() / reps;
            let mc_std_error = if errors.len() > 1 {
                (errors.iter().map(|e| (e - mc_mean).powi(2)).sum::<f64>() / (reps - 1.0) / reps)
                    .sqrt()
            } else {
                f64::NAN
            };
            let bias_exact = bias_term(truth, point.lambda)?;
            let variance_exact = variance_term(&truth.p0, point.n as f64, point.lambda)?;
            let bias_bound = point.lambda * eta0_sq;
            let variance_bound = 1.0 / (point.n as f64 * point.lambda);
            Ok(RateRecord {
                n: point.n,
                lambda: point.lambda,
                replications,
                mc_mean,
                mc_std_error,
                bias_exact,
                variance_exact,
                expected_exact: bias_exact + variance_exact,
                bias_bound,
                variance_bound,
                mc_to_bound: mc_mean / (bias_bound + variance_bound),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ns: Vec<u64> = records.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let distinct_n = ns.len() == records.len();
    let log_n: Vec<f64> = records.iter().map(|r| (r.n as f64).ln()).collect();
    let slope = |values: Vec<f64>| distinct_n.then(|| ols_slope(&log_n, &values)).flatten();

    Ok(RateReport {
        m,
        seed,
        eta0_squared_norm: eta0_sq,
        rho: (m <= MAX_DENSE_EIGEN).then(|| covariance_eigenvalues(&truth.p0)),
        rho_sum: 1.0 - truth.p0.as_slice().iter().map(|p| p * p).sum::<f64>(),
        fitted_constants: fit_constants(&records),
        mc_slope_vs_n: slope(records.iter().map(|r| r.mc_mean.ln()).collect()),
        exact_slope_vs_n: slope(records.iter().map(|r| r.expected_exact.ln()).collect()),
        records,
    })
}

fn fit_constants(records: &[RateRecord]) -> Option<(f64, f64)> {
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in records {
        a11 += r.bias_bound * r.bias_bound;
        a12 += r.bias_bound * r.variance_bound;
        a22 += r.variance_bound * r.variance_bound;
        b1 += r.bias_bound * r.mc_mean;
        b2 += r.variance_bound * r.mc_mean;
    }
    let det = a11 * a22 - a12 * a12;
    if records.len() < 2 || det.abs() <= 1e-12 * a11 * a22 {
        return None;
    }
    Some(((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det))
}

/// `(V(η̂ − η̃), V(η̃ − η0))` with `V` taken at `p0`: how far the exact
/// penalized-likelihood fit sits from the linearized one, relative to the
/// linearized estimator's own error.
pub fn approximation_gap(
    k: &CountVector,
    w: &BaseMeasure,
    lambda: f64,
    truth: &TruthSpec,
    config: &FitConfig,
) -> Result<(f64, f64)> {
    if w.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: w.len(),
        });
    }
    let fit = solve(k, w, lambda, config)?;
    let n = k.total();
    let k_tilde: Vec<f64> = k.as_slice().iter().map(|c| c / n).collect();
    let linear = linearized_estimate(&k_tilde, truth, lambda)?;
    let p0 = truth.p0.as_slice();
    let hat_minus_linear: Vec<f64> = fit
        .eta_hat
        .as_slice()
        .iter()
        .zip(&linear)
        .map(|(a, b)| a - b)
        .collect();
    let linear_minus_truth: Vec<f64> = linear
        .iter()
        .zip(truth.eta0.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    Ok((
        weighted_variance(p0, &hat_minus_linear)?,
        weighted_variance(p0, &linear_minus_truth)?,
    ))
}
