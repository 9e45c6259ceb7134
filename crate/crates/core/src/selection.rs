//! Smoothing-parameter selection over a grid of `log10 λ` values.
//!
//! Two criteria are supported:
//!
//! * an analytic delete-one cross-validation score, and
//! * for simulations with a known truth, the Kullback-Leibler loss
//!   `KL(p_true, p̂(λ))` (the oracle choice).
//!
//! The cross-validation score replaces each delete-one fit by a single Newton
//! step from the full-data fit. Removing one observation from cell `z`
//! moves `k̃` by `(k̃ − e_z)/(n − 1)`, so
//!
//! ```text
//! η̂^{[z]} ≈ η̂ − H⁻¹(e_z − k̃)/(n − 1),      H = diag(p̂) − p̂p̂ᵀ + λI
//! ```
//!
//! and substituting into the delete-one log likelihood gives
//!
//! ```text
//! V(λ) = −k̃ᵀη̂ + log Σ w_y e^{η̂_y} + α/(n − 1) · Σ_y k̃_y (e_y − k̃)ᵀ H⁻¹ e_y.
//! ```
//!
//! `α > 1` inflates the correction, which biases the choice toward more
//! smoothing.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::domain::{kl_divergence, log_sum_exp, BaseMeasure, Composition, CountVector};
use crate::error::{Error, Result};
use crate::solver::{check_lambda, solve, solve_from, FitConfig, FitResult, Problem};

pub const DEFAULT_ALPHA: f64 = 1.4;

/// Strictly decreasing `log10 λ` values; sweeps run from most to least
/// smoothing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaGrid {
    log10_values: Vec<f64>,
}

impl Default for LambdaGrid {
    /// `log10 λ` from 2 down to −6 in steps of 0.1.
    fn default() -> Self {
        Self::span(-6.0, 2.0, 0.1).expect("default grid is valid")
    }
}

impl LambdaGrid {
    /// Accepts a strictly monotone sequence in either direction.
    pub fn new(mut log10_values: Vec<f64>) -> Result<Self> {
        if log10_values.is_empty() {
            return Err(Error::InvalidConfig("lambda grid is empty".into()));
        }
        if log10_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "lambda grid has non-finite values".into(),
            ));
        }
        if log10_values.len() > 1 && log10_values[0] < log10_values[1] {
            log10_values.reverse();
        }
        if log10_values.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidConfig(
                "lambda grid must be strictly monotone".into(),
            ));
        }
        Ok(Self { log10_values })
    }

    /// `hi, hi − step, …` down to `lo` (inclusive, up to rounding).
    pub fn span(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0 && lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "invalid grid span [{lo}, {hi}] with step {step}"
            )));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Self::new((0..count).map(|i| hi - i as f64 * step).collect())
    }

    /// A grid with a single value.
    pub fn fixed(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Self::new(vec![lambda.log10()])
    }

    pub fn log10_values(&self) -> &[f64] {
        &self.log10_values
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.log10_values.iter().map(|v| 10f64.powf(*v)).collect()
    }

    pub fn len(&self) -> usize {
        self.log10_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log10_values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    CrossValidation { alpha: f64 },
    KlOracle,
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRecord {
    pub lambda: f64,
    pub log10_lambda: f64,
    /// Criterion value; `None` when the fit or the score failed.
    pub score: Option<f64>,
    pub iterations: Option<usize>,
    pub gradient_norm: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionTrace {
    pub criterion: Criterion,
    pub records: Vec<GridRecord>,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
}

impl SelectionTrace {
    pub fn chosen(&self) -> &GridRecord {
        &self.records[self.chosen_index]
    }
}

/// Fits for every grid point, in grid order (largest `λ` first).
#[derive(Debug, Clone)]
pub struct GridSweep {
    pub log10_lambdas: Vec<f64>,
    pub fits: Vec<Result<FitResult>>,
}

/// Runs `fit(λ, start)` over the grid. With `warm_start`, each point starts
/// from the previous successful solution; a failed warm start is retried cold.
pub fn sweep<F>(grid: &LambdaGrid, warm_start: bool, mut fit: F) -> GridSweep
where
    F: FnMut(f64, Option<&[f64]>) -> Result<FitResult>,
{
    let mut fits: Vec<Result<FitResult>> = Vec::with_capacity(grid.len());
    let mut previous: Option<Vec<f64>> = None;
    for lambda in grid.lambdas() {
        let result = match previous.as_deref().filter(|_| warm_start) {
            Some(start) => fit(lambda, Some(start)).or_else(|_| fit(lambda, None)),
            None => fit(lambda, None),
        };
        if let Ok(f) = &result {
            previous = Some(f.eta_hat.as_slice().to_vec());
        }
        fits.push(result);
    }
    GridSweep {
        log10_lambdas: grid.log10_values().to_vec(),
        fits,
    }
}

/// Warm-started sweep with the plain full-coordinate solver.
pub fn sweep_full(
    k: &CountVector,
    w: &BaseMeasure,
    grid: &LambdaGrid,
    config: &FitConfig,
) -> GridSweep {
    sweep(grid, true, |lambda, start| {
        solve_from(k, w, lambda, config, start)
    })
}

impl GridSweep {
    /// Scores every successful fit and returns the minimizer. Ties go to the
    /// larger `λ`.
    pub fn select_by<S>(
        &self,
        criterion: Criterion,
        mut score: S,
    ) -> Result<(FitResult, SelectionTrace)>
    where
        S: FnMut(&FitResult) -> Result<f64>,
    {
        let mut records = Vec::with_capacity(self.fits.len());
        let mut best: Option<(usize, f64)> = None;
        let mut last_error = None;
        for (i, (log10_lambda, fit)) in self.log10_lambdas.iter().zip(&self.fits).enumerate() {
            let lambda = 10f64.powf(*log10_lambda);
            let mut record = GridRecord {
                lambda,
                log10_lambda: *log10_lambda,
                score: None,
                iterations: None,
                gradient_norm: None,
                error: None,
            };
            match fit.as_ref().map_err(Clone::clone).and_then(|f| {
                record.iterations = Some(f.iterations);
                record.gradient_norm = Some(f.final_gradient_norm);
                score(f)
            }) {
                Ok(s) if s.is_finite() => {
                    record.score = Some(s);
                    if best.is_none_or(|(_, b)| s < b) {
                        best = Some((i, s));
                    }
                }
                Ok(s) => record.error = Some(format!("non-finite score {s}")),
                Err(e) => {
                    record.error = Some(e.to_string());
                    last_error = Some(e);
                }
            }
            records.push(record);
        }
        let Some((chosen_index, _)) = best else {
            let err = last_error.unwrap_or_else(|| Error::InvalidConfig("empty sweep".into()));
            return Err(Error::AllGridPointsFailed(Box::new(err)));
        };
        let fit = self.fits[chosen_index].clone()?;
        let trace = SelectionTrace {
            criterion,
            chosen_lambda: records[chosen_index].lambda,
            chosen_index,
            records,
        };
        Ok((fit, trace))
    }

    pub fn select_cv(
        &self,
        k: &CountVector,
        w: &BaseMeasure,
        alpha: f64,
    ) -> Result<(FitResult, SelectionTrace)> {
        check_alpha(alpha)?;
        self.select_by(Criterion::CrossValidation { alpha }, |fit| {
            cv_score(fit, k, w, alpha)
        })
    }

    pub fn select_oracle(&self, p_true: &Composition) -> Result<(FitResult, SelectionTrace)> {
        self.select_by(Criterion::KlOracle, |fit| kl_divergence(p_true, &fit.p_hat))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 1.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "cross-validation alpha must be at least 1, got {alpha}"
        )))
    }
}

fn check_fit(fit: &FitResult, k: &CountVector, w: &BaseMeasure) -> Result<()> {
    for found in [w.len(), fit.eta_hat.len()] {
        if found != k.len() {
            return Err(Error::LengthMismatch {
                expected: k.len(),
                found,
            });
        }
    }
    if k.total() <= 1.0 {
        return Err(Error::InsufficientData(format!(
            "cross-validation needs a total count above 1, got {}",
            k.total()
        )));
    }
    Ok(())
}

fn inverse_hessian(fit: &FitResult, k: &CountVector, w: &BaseMeasure) -> Result<DMatrix<f64>> {
    let problem = Problem::new(k, w, fit.lambda)?;
    Cholesky::new(problem.hessian(fit.p_hat.as_slice()))
        .map(|c| c.inverse())
        .ok_or(Error::Factorization(fit.lambda))
}

/// The two parts of the score: the likelihood terms
/// `−k̃ᵀη̂ + log Σ w e^{η̂}` and the unscaled delete-one correction
/// `Σ_y k̃_y (e_y − k̃)ᵀH⁻¹e_y / (n − 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvComponents {
    pub likelihood: f64,
    pub correction: f64,
}

pub fn cv_components(fit: &FitResult, k: &CountVector, w: &BaseMeasure) -> Result<CvComponents> {
    check_fit(fit, k, w)?;
    let n = k.total();
    let ktilde: Vec<f64> = k.as_slice().iter().map(|c| c / n).collect();
    let eta = fit.eta_hat.as_slice();

    let log_terms: Vec<f64> = eta
        .iter()
        .zip(w.as_slice())
        .map(|(e, wy)| e + wy.ln())
        .collect();
    let likelihood =
        -ktilde.iter().zip(eta).map(|(a, b)| a * b).sum::<f64>() + log_sum_exp(&log_terms);

    let hinv = inverse_hessian(fit, k, w)?;
    let kt = DVector::from_column_slice(&ktilde);
    let hinv_k = &hinv * &kt;
    let diag: f64 = ktilde
        .iter()
        .enumerate()
        .map(|(y, ky)| ky * hinv[(y, y)])
        .sum();
    let correction = (diag - kt.dot(&hinv_k)) / (n - 1.0);
    Ok(CvComponents {
        likelihood,
        correction,
    })
}

/// Analytic delete-one cross-validation score of a converged fit.
pub fn cv_score(fit: &FitResult, k: &CountVector, w: &BaseMeasure, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let parts = cv_components(fit, k, w)?;
    Ok(parts.likelihood + alpha * parts.correction)
}

/// One-Newton-step approximation to the fit with one observation removed
/// from cell `z`: `η̂ − H⁻¹(e_z − k̃)/(n − 1)`.
pub fn loo_one_step(
    fit: &FitResult,
    k: &CountVector,
    w: &BaseMeasure,
    z: usize,
) -> Result<Vec<f64>> {
    check_fit(fit, k, w)?;
    if z >= k.len() {
        return Err(Error::IndexOutOfRange {
            index: z,
            len: k.len(),
        });
    }
    let n = k.total();
    let hinv = inverse_hessian(fit, k, w)?;
    let mut rhs = DVector::from_iterator(k.len(), k.as_slice().iter().map(|c| -c / n));
    rhs[z] += 1.0;
    let shift = hinv * rhs;
    Ok(fit
        .eta_hat
        .as_slice()
        .iter()
        .zip(shift.iter())
        .map(|(e, s)| e - s / (n - 1.0))
        .collect())
}

/// Exact refit on `k − e_z` at the same `λ`.
pub fn loo_refit(
    k: &CountVector,
    w: &BaseMeasure,
    lambda: f64,
    z: usize,
    config: &FitConfig,
) -> Result<FitResult> {
    if z >= k.len() {
        return Err(Error::IndexOutOfRange {
            index: z,
            len: k.len(),
        });
    }
    if k.as_slice()[z] < 1.0 {
        return Err(Error::InsufficientData(format!(
            "cell {z} has count {} < 1; nothing to remove",
            k.as_slice()[z]
        )));
    }
    if k.total() <= 1.0 {
        return Err(Error::InsufficientData(
            "leave-one-out needs a total count above 1".into(),
        ));
    }
    let mut reduced = k.as_slice().to_vec();
    reduced[z] -= 1.0;
    solve(&CountVector::new(reduced)?, w, lambda, config)
}

/// Cross-validated fit over `grid`.
pub fn select_lambda_cv(
    k: &CountVector,
    w: &BaseMeasure,
    grid: &LambdaGrid,
    alpha: f64,
    config: &FitConfig,
) -> Result<(FitResult, SelectionTrace)> {
    check_alpha(alpha)?;
    sweep_full(k, w, grid, config).select_cv(k, w, alpha)
}

/// Fit minimizing `KL(p_true, p̂)` over `grid`.
pub fn select_lambda_oracle(
    k: &CountVector,
    w: &BaseMeasure,
    grid: &LambdaGrid,
    p_true: &Composition,
    config: &FitConfig,
) -> Result<(FitResult, SelectionTrace)> {
    if p_true.len() != k.len() {
        return Err(Error::LengthMismatch {
            expected: k.len(),
            found: p_true.len(),
        });
    }
    sweep_full(k, w, grid, config).select_oracle(p_true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(v: &[f64]) -> CountVector {
        CountVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let g = LambdaGrid::default();
        assert_eq!(g.len(), 81);
        assert_eq!(g.log10_values()[0], 2.0);
        assert!((g.log10_values()[80] + 6.0).abs() < 1e-12);
    }

    #[test]
    fn grid_validation() {
        assert!(LambdaGrid::new(vec![]).is_err());
        assert!(LambdaGrid::new(vec![1.0, 1.0]).is_err());
        assert!(LambdaGrid::new(vec![1.0, 2.0, 1.5]).is_err());
        let g = LambdaGrid::new(vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(g.log10_values(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn uniform_score_closed_form() {
        // Uniform counts and weights: η̂ = 0 and
        // V = log m + α (m − 1) / ((n − 1)(1 + mλ)).
        let m = 6usize;
        let k = counts(&[3.0; 6]);
        let w = BaseMeasure::uniform(m).unwrap();
        for &lambda in &[1e-3, 0.2, 5.0] {
            let fit = solve(&k, &w, lambda, &FitConfig::default()).unwrap();
            let v = cv_score(&fit, &k, &w, 1.4).unwrap();
            let expected =
                (m as f64).ln() + 1.4 * (m as f64 - 1.0) / (17.0 * (1.0 + m as f64 * lambda));
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn score_approaches_log_total_weight() {
        let k = counts(&[5.0, 1.0, 0.0, 2.0]);
        let w = BaseMeasure::new(vec![2.0, 1.0, 1.0, 4.0]).unwrap();
        let fit = solve(&k, &w, 1e8, &FitConfig::default()).unwrap();
        let v = cv_score(&fit, &k, &w, 1.4).unwrap();
        assert!((v - 8f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn uniform_selection_picks_largest_lambda() {
        let k = counts(&[4.0; 5]);
        let w = BaseMeasure::uniform(5).unwrap();
        let grid = LambdaGrid::default();
        let (fit, trace) = select_lambda_cv(&k, &w, &grid, 1.4, &FitConfig::default()).unwrap();
        assert_eq!(trace.chosen_index, 0);
        assert_eq!(fit.lambda, 100.0);
        assert!(trace.records.iter().all(|r| r.score.is_some()));
    }

    #[test]
    fn ties_break_toward_larger_lambda() {
        let k = counts(&[4.0, 1.0]);
        let w = BaseMeasure::uniform(2).unwrap();
        let grid = LambdaGrid::new(vec![1.0, 0.0, -1.0]).unwrap();
        let s = sweep_full(&k, &w, &grid, &FitConfig::default());
        let (_, trace) = s.select_by(Criterion::KlOracle, |_| Ok(1.0)).unwrap();
        assert_eq!(trace.chosen_index, 0);
    }

    #[test]
    fn failed_points_are_recorded_and_skipped() {
        let k = counts(&[4.0, 1.0]);
        let w = BaseMeasure::uniform(2).unwrap();
        let grid = LambdaGrid::new(vec![1.0, 0.0, -1.0]).unwrap();
        let s = sweep(&grid, false, |lambda, _| {
            if lambda > 5.0 {
                Err(Error::Factorization(lambda))
            } else {
                solve(&k, &w, lambda, &FitConfig::default())
            }
        });
        let (_, trace) = s.select_cv(&k, &w, 1.4).unwrap();
        assert!(trace.records[0].error.is_some());
        assert!(trace.records[0].score.is_none());
        assert!(trace.chosen_index > 0);

        let all_bad = sweep(&grid, false, |lambda, _| Err(Error::Factorization(lambda)));
        assert!(matches!(
            all_bad.select_cv(&k, &w, 1.4),
            Err(Error::AllGridPointsFailed(_))
        ));
    }

    #[test]
    fn oracle_at_shrinkage_target_picks_top() {
        let k = counts(&[6.0, 1.0, 0.0, 3.0]);
        let w = BaseMeasure::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p_true = w.normalized();
        let grid = LambdaGrid::default();
        let (_, trace) =
            select_lambda_oracle(&k, &w, &grid, &p_true, &FitConfig::default()).unwrap();
        assert_eq!(trace.chosen_index, 0);
        let scores: Vec<f64> = trace.records.iter().map(|r| r.score.unwrap()).collect();
        assert!(scores.windows(2).all(|s| s[1] >= s[0] - 1e-12));
    }

    #[test]
    fn oracle_at_mle_picks_bottom() {
        let k = counts(&[6.0, 1.0, 2.0, 3.0]);
        let w = BaseMeasure::uniform(4).unwrap();
        let p_true = Composition::normalized(k.as_slice().to_vec()).unwrap();
        let grid = LambdaGrid::default();
        let (_, trace) =
            select_lambda_oracle(&k, &w, &grid, &p_true, &FitConfig::default()).unwrap();
        assert_eq!(trace.chosen_index, grid.len() - 1);
    }

    #[test]
    fn loo_refit_bookkeeping() {
        let k = counts(&[2.0, 2.0]);
        let w = BaseMeasure::uniform(2).unwrap();
        let config = FitConfig::default();
        let a = loo_refit(&k, &w, 0.3, 0, &config).unwrap();
        let direct = solve(&counts(&[1.0, 2.0]), &w, 0.3, &config).unwrap();
        assert_eq!(a.eta_hat, direct.eta_hat);
        let b = loo_refit(&k, &w, 0.3, 1, &config).unwrap();
        for y in 0..2 {
            assert!((a.eta_hat.as_slice()[y] - b.eta_hat.as_slice()[1 - y]).abs() < 1e-12);
        }
        assert!(matches!(
            loo_refit(&counts(&[0.5, 2.0]), &w, 0.3, 0, &config),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn cv_rejects_tiny_totals_and_bad_alpha() {
        let k = counts(&[1.0, 0.0]);
        let w = BaseMeasure::uniform(2).unwrap();
        let fit = solve(&k, &w, 0.5, &FitConfig::default()).unwrap();
        assert!(matches!(
            cv_score(&fit, &k, &w, 1.4),
            Err(Error::InsufficientData(_))
        ));
        let k = counts(&[3.0, 1.0]);
        let fit = solve(&k, &w, 0.5, &FitConfig::default()).unwrap();
        assert!(cv_score(&fit, &k, &w, 0.5).is_err());
    }
}
