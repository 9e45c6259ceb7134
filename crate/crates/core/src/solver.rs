//! Fixed-`λ` minimization of the penalized likelihood
//!
//! ```text
//! f(η) = -k̃ᵀη + log Σ w_y e^{η_y} + (λ/2) ηᵀη,     k̃ = k / n
//! ```
//!
//! by damped Newton iteration in all `m` coordinates. The gradient is
//! `-k̃ + p(η) + λη` and the Hessian `diag(p) − ppᵀ + λI`, positive definite
//! with eigenvalues at least `λ`. Because `1ᵀ(k̃ − p) = 0`, any stationary
//! point has `Σ η_y = 0`; no centering constraint is imposed.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::domain::{
    empirical_composition, softmax_with_log_partition, BaseMeasure, Composition, CountVector,
    LogDensity,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitConfig {
    /// Stop when the gradient sup-norm falls to this value.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Step-length multiplier applied on each failed backtracking trial.
    pub line_search_shrink: f64,
    pub max_line_search_steps: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-9,
            max_iterations: 50,
            line_search_shrink: 0.5,
            max_line_search_steps: 30,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tolerance > 0.0 && self.gradient_tolerance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gradient tolerance must be positive, got {}",
                self.gradient_tolerance
            )));
        }
        if self.max_iterations == 0 || self.max_line_search_steps == 0 {
            return Err(Error::InvalidConfig(
                "iteration limits must be at least 1".into(),
            ));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "line search shrink must lie in (0, 1), got {}",
                self.line_search_shrink
            )));
        }
        Ok(())
    }
}

/// A converged fit for one count vector at one `λ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub eta_hat: LogDensity,
    pub p_hat: Composition,
    pub lambda: f64,
    /// Newton steps taken.
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub objective_value: f64,
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidLambda(lambda))
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, found })
    }
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// The objective in possibly reduced coordinates. `multiplicity[y]` counts
/// how many original cells coordinate `y` stands for; it scales the ridge
/// term (the base weight of a merged coordinate is carried by `log_w`).
#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub ktilde: Vec<f64>,
    pub log_w: Vec<f64>,
    pub multiplicity: Option<Vec<f64>>,
    pub lambda: f64,
}

pub(crate) struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub p: Vec<f64>,
}

impl Problem {
    pub fn new(k: &CountVector, w: &BaseMeasure, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        check_len(k.len(), w.len())?;
        Ok(Self {
            ktilde: empirical_composition(k)?,
            log_w: w.log_weights(),
            multiplicity: None,
            lambda,
        })
    }

    fn mult(&self, y: usize) -> f64 {
        self.multiplicity.as_ref().map_or(1.0, |m| m[y])
    }

    pub fn evaluate(&self, eta: &[f64]) -> Evaluation {
        let (p, log_partition) = softmax_with_log_partition(eta, &self.log_w);
        let mut linear = 0.0;
        let mut ridge = 0.0;
        let mut gradient = Vec::with_capacity(eta.len());
        for (y, &e) in eta.iter().enumerate() {
            let m = self.mult(y);
            linear += self.ktilde[y] * e;
            ridge += m * e * e;
            gradient.push(p[y] - self.ktilde[y] + self.lambda * m * e);
        }
        Evaluation {
            value: -linear + log_partition + 0.5 * self.lambda * ridge,
            gradient,
            p,
        }
    }

    pub fn hessian(&self, p: &[f64]) -> DMatrix<f64> {
        let m = p.len();
        DMatrix::from_fn(m, m, |i, j| {
            let outer = -p[i] * p[j];
            if i == j {
                outer + p[i] + self.lambda * self.mult(i)
            } else {
                outer
            }
        })
    }
}

pub(crate) struct NewtonOutcome {
    pub eta: Vec<f64>,
    pub p: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

pub(crate) fn newton(
    problem: &Problem,
    start: Vec<f64>,
    config: &FitConfig,
) -> Result<NewtonOutcome> {
    config.validate()?;
    let mut eta = start;
    let mut current = problem.evaluate(&eta);
    let mut iterations = 0;
    loop {
        let gradient_norm = sup_norm(&current.gradient);
        if gradient_norm <= config.gradient_tolerance {
            let (eta, current, gradient_norm) = polish(problem, eta, current, gradient_norm);
            return Ok(NewtonOutcome {
                eta,
                p: current.p,
                value: current.value,
                gradient_norm,
                iterations,
            });
        }
        if iterations == config.max_iterations || !gradient_norm.is_finite() {
            return Err(Error::NotConverged {
                lambda: problem.lambda,
                iterations,
                gradient_norm,
            });
        }

        let chol = Cholesky::new(problem.hessian(&current.p))
            .ok_or(Error::Factorization(problem.lambda))?;
        let rhs = DVector::from_iterator(eta.len(), current.gradient.iter().map(|g| -g));
        let direction = chol.solve(&rhs);

        // Simple-decrease backtracking. Near the optimum the decrease drops
        // below rounding, so a step that keeps the value within a few ulps
        // while shrinking the gradient is also accepted.
        let slack = 64.0 * f64::EPSILON * (1.0 + current.value.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..config.max_line_search_steps {
            let trial: Vec<f64> = eta
                .iter()
                .zip(direction.iter())
                .map(|(e, d)| e + step * d)
                .collect();
            let eval = problem.evaluate(&trial);
            if eval.value.is_finite()
                && (eval.value < current.value
                    || (eval.value <= current.value + slack
                        && sup_norm(&eval.gradient) < gradient_norm))
            {
                accepted = Some((trial, eval));
                break;
            }
            step *= config.line_search_shrink;
        }
        let Some((trial, eval)) = accepted else {
            return Err(Error::NotConverged {
                lambda: problem.lambda,
                iterations,
                gradient_norm,
            });
        };
        eta = trial;
        current = eval;
        iterations += 1;
    }
}

/// Full Newton steps past the tolerance, kept only while the gradient
/// shrinks. Small `λ` makes the solution sensitive to the last residual
/// (error in `η` is about `‖g‖/λ`), so this tightens agreement between
/// solves that reach the tolerance by different paths.
fn polish(
    problem: &Problem,
    mut eta: Vec<f64>,
    mut current: Evaluation,
    mut gradient_norm: f64,
) -> (Vec<f64>, Evaluation, f64) {
    for _ in 0..POLISH_STEPS {
        let Some(chol) = Cholesky::new(problem.hessian(&current.p)) else {
            break;
        };
        let rhs = DVector::from_iterator(eta.len(), current.gradient.iter().map(|g| -g));
        let direction = chol.solve(&rhs);
        let trial: Vec<f64> = eta
            .iter()
            .zip(direction.iter())
            .map(|(e, d)| e + d)
            .collect();
        let eval = problem.evaluate(&trial);
        let norm = sup_norm(&eval.gradient);
        if !(eval.value.is_finite() && norm < gradient_norm) {
            break;
        }
        eta = trial;
        current = eval;
        gradient_norm = norm;
    }
    (eta, current, gradient_norm)
}

const POLISH_STEPS: usize = 2;

/// Penalized likelihood value at `eta`, partition term via log-sum-exp.
pub fn objective(k: &CountVector, w: &BaseMeasure, lambda: f64, eta: &[f64]) -> Result<f64> {
    let problem = Problem::new(k, w, lambda)?;
    check_len(k.len(), eta.len())?;
    Ok(problem.evaluate(eta).value)
}

/// `-k̃ + p(η) + λη`.
pub fn gradient(k: &CountVector, w: &BaseMeasure, lambda: f64, eta: &[f64]) -> Result<Vec<f64>> {
    let problem = Problem::new(k, w, lambda)?;
    check_len(k.len(), eta.len())?;
    Ok(problem.evaluate(eta).gradient)
}

/// `diag(p) − ppᵀ + λI`.
pub fn hessian(k: &CountVector, w: &BaseMeasure, lambda: f64, eta: &[f64]) -> Result<DMatrix<f64>> {
    let problem = Problem::new(k, w, lambda)?;
    check_len(k.len(), eta.len())?;
    let (p, _) = softmax_with_log_partition(eta, &problem.log_w);
    Ok(problem.hessian(&p))
}

/// Minimizes the objective starting from `η = 0`.
pub fn solve(
    k: &CountVector,
    w: &BaseMeasure,
    lambda: f64,
    config: &FitConfig,
) -> Result<FitResult> {
    solve_from(k, w, lambda, config, None)
}

/// As [`solve`], optionally warm-started from `start`.
pub fn solve_from(
    k: &CountVector,
    w: &BaseMeasure,
    lambda: f64,
    config: &FitConfig,
    start: Option<&[f64]>,
) -> Result<FitResult> {
    let problem = Problem::new(k, w, lambda)?;
    let start = match start {
        Some(s) => {
            check_len(k.len(), s.len())?;
            s.to_vec()
        }
        None => vec![0.0; k.len()],
    };
    let outcome = newton(&problem, start, config)?;
    Ok(FitResult {
        eta_hat: LogDensity::from_solver(outcome.eta),
        p_hat: Composition::new(outcome.p)?,
        lambda,
        iterations: outcome.iterations,
        final_gradient_norm: outcome.gradient_norm,
        objective_value: outcome.value,
    })
}

/// `max_y |k̃_y − p̂_y − λη̂_y|`, zero exactly at the minimizer.
pub fn stationarity_residual(fit: &FitResult, k: &CountVector) -> f64 {
    let n = k.total();
    k.as_slice()
        .iter()
        .zip(fit.p_hat.as_slice())
        .zip(fit.eta_hat.as_slice())
        .map(|((&c, &p), &e)| (c / n - p - fit.lambda * e).abs())
        .fold(0.0, f64::max)
}
