//! Composition estimation from count data.
//!
//! Counts over a nominal domain of `m` cells are turned into a strictly
//! positive probability vector by minimizing a penalized likelihood
//!
//! ```text
//! -(1/n) Σ k_y η_y + log Σ w_y exp(η_y) + (λ/2) Σ η_y²
//! ```
//!
//! where `w` is a base measure carrying prior shape information and `λ`
//! trades goodness of fit against shrinkage toward `w / Σw`. The smoothing
//! parameter is chosen by an analytic delete-one cross-validation score, and
//! a two-stage estimator borrows strength across samples by using the
//! collapsed-data fit as the base measure for each individual sample.
//!
//! Module map:
//!
//! * [`domain`]: value types (counts, base measure, log density, composition)
//!   and the loss functionals shared by everything else.
//! * [`solver`]: damped Newton minimization for a fixed `λ`.
//! * [`selection`]: `λ` grids, cross-validation and Kullback-Leibler oracle
//!   selection.
//! * [`estimator`]: the single-sample and two-stage estimators, plus the
//!   zero-count collapse used under uniform weights.
//! * [`linearized`]: the closed-form linearized estimator and its error
//!   diagnostics.
//! * [`sim`]: the seeded simulation study harness.

pub mod domain;
pub mod error;
pub mod estimator;
pub mod linearized;
pub mod rng;
pub mod selection;
pub mod sim;
pub mod solver;
pub mod stats;

pub use domain::{
    empirical_composition, kl_divergence, quadratic_proxy_v, to_composition, BaseMeasure,
    Composition, CountVector, LogDensity,
};
pub use error::{Error, Result};
pub use estimator::{
    solve_with_zero_collapse, sscomp, sscomp2, CompositionMatrix, CountMatrix, EstimateOptions,
    SingleEstimate, TwoStageEstimate, ZeroCollapse,
};
pub use selection::{cv_score, loo_refit, select_lambda_cv, select_lambda_oracle, LambdaGrid};
pub use solver::{solve, FitConfig, FitResult};
