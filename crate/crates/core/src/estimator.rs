//! User-facing estimators.
//!
//! [`sscomp`] fits one count vector with a cross-validated `λ`. [`sscomp2`]
//! handles a matrix of samples in two stages: the columns are summed and
//! fitted with uniform weights to get a pooled composition `p̃`, then each
//! column is fitted with base measure `w ∝ p̃`.
//!
//! Under uniform weights every zero-count cell has the same fitted `η̂`, so
//! those cells can be merged into a single coordinate carrying base weight
//! `z` and ridge multiplicity `z` (for `z` zero cells). [`ZeroCollapse`]
//! controls when that reduction is used.

use rayon::prelude::*;
use serde::Serialize;

use crate::domain::{kl_divergence, BaseMeasure, Composition, CountVector, LogDensity};
use crate::error::{Error, Result};
use crate::selection::{
    cv_score, sweep, Criterion, GridSweep, LambdaGrid, SelectionTrace, DEFAULT_ALPHA,
};
use crate::solver::{check_lambda, newton, solve_from, FitConfig, FitResult, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZeroCollapse {
    /// Collapse when weights are uniform and at least a quarter of the cells
    /// (and at least two) have zero count.
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateOptions {
    pub alpha: f64,
    pub grid: LambdaGrid,
    pub config: FitConfig,
    pub zero_collapse: ZeroCollapse,
    /// Skip selection and fit at this `λ`.
    pub lambda: Option<f64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            grid: LambdaGrid::default(),
            config: FitConfig::default(),
            zero_collapse: ZeroCollapse::Auto,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleEstimate {
    pub fit: FitResult,
    pub trace: SelectionTrace,
    pub zero_cells: usize,
    pub zero_collapse_used: bool,
}

impl SingleEstimate {
    pub fn composition(&self) -> &Composition {
        &self.fit.p_hat
    }
}

fn collapse_applies(k: &CountVector, w: &BaseMeasure, mode: ZeroCollapse) -> Result<bool> {
    match mode {
        ZeroCollapse::Never => Ok(false),
        ZeroCollapse::Always => {
            if w.is_uniform() {
                Ok(true)
            } else {
                Err(Error::InvalidConfig(
                    "zero-count collapse requires uniform weights".into(),
                ))
            }
        }
        ZeroCollapse::Auto => {
            let zeros = k.zero_cells();
            Ok(w.is_uniform() && zeros >= 2 && 4 * zeros >= k.len())
        }
    }
}

/// Sweeps `grid` with the solver chosen by `mode`.
pub fn sweep_with_options(
    k: &CountVector,
    w: &BaseMeasure,
    grid: &LambdaGrid,
    config: &FitConfig,
    mode: ZeroCollapse,
) -> Result<(GridSweep, bool)> {
    let collapse = collapse_applies(k, w, mode)?;
    let result = if collapse {
        sweep(grid, true, |lambda, start| {
            solve_collapsed_from(k, w, lambda, config, start)
        })
    } else {
        sweep(grid, true, |lambda, start| {
            solve_from(k, w, lambda, config, start)
        })
    };
    Ok((result, collapse))
}

/// Cross-validated single-sample estimate. `w = None` means uniform weights.
/// Zero-count cells must be present in `k`; its length fixes `m`.
pub fn sscomp(
    k: &CountVector,
    w: Option<&BaseMeasure>,
    options: &EstimateOptions,
) -> Result<SingleEstimate> {
    k.require_positive_total()?;
    let uniform;
    let w = match w {
        Some(w) => {
            if w.len() != k.len() {
                return Err(Error::LengthMismatch {
                    expected: k.len(),
                    found: w.len(),
                });
            }
            w
        }
        None => {
            uniform = BaseMeasure::uniform(k.len())?;
            &uniform
        }
    };

    let (grid, fixed) = match options.lambda {
        Some(lambda) => (LambdaGrid::fixed(lambda)?, true),
        None => (options.grid.clone(), false),
    };
    let (swept, zero_collapse_used) =
        sweep_with_options(k, w, &grid, &options.config, options.zero_collapse)?;
    let (fit, trace) = if fixed {
        // Report the score when it is defined; it does not drive anything.
        swept.select_by(
            Criterion::CrossValidation {
                alpha: options.alpha,
            },
            |fit| Ok(cv_score(fit, k, w, options.alpha).unwrap_or(0.0)),
        )?
    } else {
        swept.select_cv(k, w, options.alpha)?
    };
    Ok(SingleEstimate {
        fit,
        trace,
        zero_cells: k.zero_cells(),
        zero_collapse_used,
    })
}

/// Cells × samples table of non-negative counts; every column total is
/// positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountMatrix {
    columns: Vec<CountVector>,
}

impl CountMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(Error::Empty);
        };
        let m = first.len();
        let mut out = Vec::with_capacity(columns.len());
        for (column, values) in columns.into_iter().enumerate() {
            if values.len() != m {
                return Err(Error::Column {
                    column,
                    source: Box::new(Error::LengthMismatch {
                        expected: m,
                        found: values.len(),
                    }),
                });
            }
            let counts = CountVector::new(values).map_err(|e| Error::Column {
                column,
                source: Box::new(e),
            })?;
            if counts.total() <= 0.0 {
                return Err(Error::ZeroColumn { column });
            }
            out.push(counts);
        }
        Ok(Self { columns: out })
    }

    /// Rows are cells, entries within a row are samples.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Empty);
        };
        let s = first.len();
        if s == 0 {
            return Err(Error::Empty);
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != s) {
            return Err(Error::LengthMismatch {
                expected: s,
                found: bad.len(),
            });
        }
        Self::from_columns(
            (0..s)
                .map(|j| rows.iter().map(|r| r[j]).collect())
                .collect(),
        )
    }

    pub fn n_cells(&self) -> usize {
        self.columns[0].len()
    }

    pub fn n_samples(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &CountVector {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[CountVector] {
        &self.columns
    }

    /// Element-wise sum over samples.
    pub fn collapsed(&self) -> CountVector {
        let mut sum = vec![0.0; self.n_cells()];
        for col in &self.columns {
            for (acc, v) in sum.iter_mut().zip(col.as_slice()) {
                *acc += v;
            }
        }
        CountVector::new(sum).expect("sums of valid counts are valid")
    }
}

/// Cells × samples matrix whose columns are compositions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositionMatrix {
    columns: Vec<Composition>,
}

impl CompositionMatrix {
    pub fn from_columns(columns: Vec<Composition>) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(Error::Empty);
        };
        let m = first.len();
        if let Some(bad) = columns.iter().find(|c| c.len() != m) {
            return Err(Error::LengthMismatch {
                expected: m,
                found: bad.len(),
            });
        }
        Ok(Self { columns })
    }

    pub fn n_cells(&self) -> usize {
        self.columns[0].len()
    }

    pub fn n_samples(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, cell: usize, sample: usize) -> f64 {
        self.columns[sample].as_slice()[cell]
    }

    pub fn column(&self, j: usize) -> &Composition {
        &self.columns[j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_cells())
            .map(|i| self.columns.iter().map(|c| c.as_slice()[i]).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnEstimate {
    pub estimate: SingleEstimate,
    /// `KL(p̃, p̂_x)`: how far the column moved away from the pooled prior.
    /// Advisory only.
    pub kl_from_prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStageEstimate {
    /// Stage-1 fit of the collapsed counts with uniform weights.
    pub prior: SingleEstimate,
    pub columns: Vec<ColumnEstimate>,
    pub matrix: CompositionMatrix,
}

/// Two-stage estimate. Columns are fitted in parallel; results do not depend
/// on scheduling.
pub fn sscomp2(counts: &CountMatrix, options: &EstimateOptions) -> Result<TwoStageEstimate> {
    let prior = sscomp(&counts.collapsed(), None, options)?;
    let w = BaseMeasure::from(prior.composition());
    let columns: Vec<ColumnEstimate> = counts
        .columns()
        .par_iter()
        .enumerate()
        .map(|(column, k)| {
            let estimate = sscomp(k, Some(&w), options).map_err(|e| Error::Column {
                column,
                source: Box::new(e),
            })?;
            let kl_from_prior = kl_divergence(prior.composition(), estimate.composition())?;
            Ok(ColumnEstimate {
                estimate,
                kl_from_prior,
            })
        })
        .collect::<Result<_>>()?;
    let matrix = CompositionMatrix::from_columns(
        columns
            .iter()
            .map(|c| c.estimate.composition().clone())
            .collect(),
    )?;
    Ok(TwoStageEstimate {
        prior,
        columns,
        matrix,
    })
}

/// Fixed-`λ` fit with all zero-count cells merged into one coordinate.
/// Requires uniform weights; the result is expanded back to all cells.
pub fn solve_with_zero_collapse(
    k: &CountVector,
    w: &BaseMeasure,
    lambda: f64,
    config: &FitConfig,
) -> Result<FitResult> {
    if !w.is_uniform() {
        return Err(Error::InvalidConfig(
            "zero-count collapse requires uniform weights".into(),
        ));
    }
    solve_collapsed_from(k, w, lambda, config, None)
}

fn solve_collapsed_from(
    k: &CountVector,
    w: &BaseMeasure,
    lambda: f64,
    config: &FitConfig,
    start: Option<&[f64]>,
) -> Result<FitResult> {
    check_lambda(lambda)?;
    let full = Problem::new(k, w, lambda)?;
    let positive: Vec<usize> = (0..k.len()).filter(|&y| k.as_slice()[y] > 0.0).collect();
    let zeros = k.len() - positive.len();
    if zeros == 0 {
        return solve_from(k, w, lambda, config, start);
    }
    let zero_index = (0..k.len()).find(|&y| k.as_slice()[y] == 0.0).unwrap();

    let log_c = w.as_slice()[0].ln();
    let z = zeros as f64;
    let mut ktilde: Vec<f64> = positive.iter().map(|&y| full.ktilde[y]).collect();
    ktilde.push(0.0);
    let mut log_w = vec![log_c; positive.len()];
    log_w.push(log_c + z.ln());
    let mut multiplicity = vec![1.0; positive.len()];
    multiplicity.push(z);
    let reduced = Problem {
        ktilde,
        log_w,
        multiplicity: Some(multiplicity),
        lambda,
    };

    let start = match start {
        Some(s) => {
            let mut r: Vec<f64> = positive.iter().map(|&y| s[y]).collect();
            r.push(s[zero_index]);
            r
        }
        None => vec![0.0; positive.len() + 1],
    };
    let outcome = newton(&reduced, start, config)?;

    let merged_eta = outcome.eta[positive.len()];
    let merged_p = outcome.p[positive.len()] / z;
    let mut eta = vec![merged_eta; k.len()];
    let mut p = vec![merged_p; k.len()];
    for (r, &y) in positive.iter().enumerate() {
        eta[y] = outcome.eta[r];
        p[y] = outcome.p[r];
    }
    // The merged coordinate's gradient is z times a full-coordinate one.
    let gradient_norm = full
        .evaluate(&eta)
        .gradient
        .iter()
        .fold(0.0f64, |acc, g| acc.max(g.abs()));
    Ok(FitResult {
        eta_hat: LogDensity::from_solver(eta),
        p_hat: Composition::new(p)?,
        lambda,
        iterations: outcome.iterations,
        final_gradient_norm: gradient_norm,
        objective_value: outcome.value,
    })
}
