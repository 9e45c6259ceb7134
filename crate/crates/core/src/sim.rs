//! Seeded simulation study.
//!
//! Truths: `Z_y ~ N(0, 1)` once, then `Z_{x,y} = Z_y + z_{x,y}` with
//! `z_{x,y} ~ N(0, σ²)` for each of `s` columns, and `p_{x,y} ∝ e^{Z_{x,y}}`.
//! A total of `N` observations is split unevenly over the columns, each
//! column is sampled from its multinomial, and every column is fitted four
//! times: uniform and pooled-prior weights, each with `λ` chosen by
//! cross-validation (`λ_v`) and by the KL oracle (`λ_o`).

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::domain::{kl_divergence, BaseMeasure, Composition, CountVector};
use crate::error::{Error, Result};
use crate::estimator::{sscomp, sweep_with_options, EstimateOptions, ZeroCollapse};
use crate::rng::{stream, streams};
use crate::selection::{LambdaGrid, DEFAULT_ALPHA};
use crate::solver::FitConfig;
use crate::stats::FiveNumber;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyConfig {
    pub m: usize,
    pub s: usize,
    pub sigma2_between: f64,
    pub n_total: u64,
    pub seed: u64,
    pub grid: LambdaGrid,
    pub alpha: f64,
    /// Symmetric Dirichlet concentration for splitting `n_total`.
    pub split_concentration: f64,
    /// A column counts as a cross-validation failure when
    /// `L(λ_v) > cv_failure_factor · L(λ_o)`.
    pub cv_failure_factor: f64,
    pub config: FitConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            m: 100,
            s: 50,
            sigma2_between: 0.25,
            n_total: 10_000,
            seed: 20_240_601,
            grid: LambdaGrid::default(),
            alpha: DEFAULT_ALPHA,
            split_concentration: 25.0,
            cv_failure_factor: 2.0,
            config: FitConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.m < 2 {
            return fail(format!("m must be at least 2, got {}", self.m));
        }
        if self.s < 1 {
            return fail("s must be at least 1".into());
        }
        if self.n_total < self.s as u64 {
            return fail(format!(
                "total size {} is smaller than the number of columns {}",
                self.n_total, self.s
            ));
        }
        if !(self.sigma2_between > 0.0 && self.sigma2_between.is_finite()) {
            return fail(format!(
                "between-column variance must be positive, got {}",
                self.sigma2_between
            ));
        }
        if !(self.split_concentration > 0.0 && self.split_concentration.is_finite()) {
            return fail("split concentration must be positive".into());
        }
        if self.cv_failure_factor.is_nan() || self.cv_failure_factor < 1.0 {
            return fail("cv failure factor must be at least 1".into());
        }
        self.config.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truths {
    /// Shared field `Z_y`.
    pub z: Vec<f64>,
    /// Column fields `Z_{x,y}`, one vector per column.
    pub column_fields: Vec<Vec<f64>>,
    pub compositions: Vec<Composition>,
}

fn softmax(values: &[f64]) -> Result<Composition> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Composition::normalized(values.iter().map(|v| (v - max).exp()).collect())
}

pub fn generate_truths(config: &StudyConfig) -> Result<Truths> {
    config.validate()?;
    let mut rng = stream(config.seed, streams::TRUTHS);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let between = Normal::new(0.0, config.sigma2_between.sqrt())
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let z: Vec<f64> = (0..config.m).map(|_| std_normal.sample(&mut rng)).collect();
    let column_fields: Vec<Vec<f64>> = (0..config.s)
        .map(|_| z.iter().map(|zy| zy + between.sample(&mut rng)).collect())
        .collect();
    let compositions = column_fields
        .iter()
        .map(|f| softmax(f))
        .collect::<Result<_>>()?;
    Ok(Truths {
        z,
        column_fields,
        compositions,
    })
}

/// Splits `n_total` into `s` positive integers: Dirichlet proportions scaled
/// by `n_total`, rounded by largest remainder.
pub fn split_total(n_total: u64, s: usize, concentration: f64, seed: u64) -> Result<Vec<u64>> {
    if s == 0 || n_total < s as u64 {
        return Err(Error::InvalidConfig(format!(
            "cannot split {n_total} into {s} positive parts"
        )));
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = stream(seed, streams::SPLIT);
    let draws: Vec<f64> = (0..s).map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = draws.iter().sum();
    let exact: Vec<f64> = draws.iter().map(|g| g / total * n_total as f64).collect();

    let mut sizes: Vec<u64> = exact.iter().map(|v| v.floor() as u64).collect();
    let assigned: u64 = sizes.iter().sum();
    let mut order: Vec<usize> = (0..s).collect();
    // Largest fractional part first; index breaks ties.
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().take((n_total - assigned) as usize) {
        sizes[i] += 1;
    }
    // Every column needs at least one observation.
    while let Some(empty) = sizes.iter().position(|&n| n == 0) {
        let largest = (0..s)
            .max_by_key(|&i| (sizes[i], std::cmp::Reverse(i)))
            .unwrap();
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    Ok(sizes)
}

/// Multinomial draw by sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(
    p: &Composition,
    n: u64,
    rng: &mut R,
) -> Result<CountVector> {
    let probs = p.as_slice();
    let mut counts = vec![0.0; probs.len()];
    let mut remaining = n;
    let mut mass = 1.0;
    for (y, &py) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if y + 1 == probs.len() {
            counts[y] = remaining as f64;
            break;
        }
        let q = (py / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, q)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .sample(rng);
        counts[y] = draw as f64;
        remaining -= draw;
        mass -= py;
    }
    CountVector::new(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Uniform,
    Prior,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Uniform => "uniform",
            Scheme::Prior => "prior",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnRecord {
    pub column: usize,
    pub scheme: Scheme,
    pub n: u64,
    pub zero_cells: usize,
    pub lambda_cv: f64,
    pub lambda_oracle: f64,
    /// `L(λ_v) = KL(p_x, p̂(λ_v))`.
    pub loss_cv: f64,
    /// `L(λ_o)`.
    pub loss_oracle: f64,
    /// `L(λ_o) / L(λ_v)`.
    pub efficacy: f64,
    pub cv_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub loss_cv: FiveNumber,
    pub loss_oracle: FiveNumber,
    pub efficacy: FiveNumber,
    pub cv_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub column_sizes: Vec<u64>,
    /// `λ` chosen for the collapsed-data prior fit.
    pub prior_lambda: f64,
    /// Definition used for `cv_failure`.
    pub cv_failure_rule: String,
    /// Column-major: all uniform records, then all prior records.
    pub records: Vec<ColumnRecord>,
    pub summaries: Vec<SchemeSummary>,
}

/// One row of the tidy export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TidyRow {
    pub column: usize,
    pub scheme: &'static str,
    pub selector: &'static str,
    pub n: u64,
    pub lambda: f64,
    pub log10_lambda: f64,
    pub kl_loss: f64,
}

impl StudyReport {
    pub fn records_for(&self, scheme: Scheme) -> impl Iterator<Item = &ColumnRecord> {
        self.records.iter().filter(move |r| r.scheme == scheme)
    }

    pub fn summary(&self, scheme: Scheme) -> &SchemeSummary {
        self.summaries
            .iter()
            .find(|s| s.scheme == scheme)
            .expect("both schemes are summarized")
    }

    /// One row per column × scheme × selector.
    pub fn tidy_rows(&self) -> Vec<TidyRow> {
        self.records
            .iter()
            .flat_map(|r| {
                [
                    ("cv", r.lambda_cv, r.loss_cv),
                    ("oracle", r.lambda_oracle, r.loss_oracle),
                ]
                .into_iter()
                .map(move |(selector, lambda, kl_loss)| TidyRow {
                    column: r.column,
                    scheme: r.scheme.as_str(),
                    selector,
                    n: r.n,
                    lambda,
                    log10_lambda: lambda.log10(),
                    kl_loss,
                })
            })
            .collect()
    }
}

fn fit_column(
    column: usize,
    scheme: Scheme,
    k: &CountVector,
    w: &BaseMeasure,
    truth: &Composition,
    config: &StudyConfig,
) -> Result<ColumnRecord> {
    // One sweep feeds both selectors.
    let (swept, _) = sweep_with_options(k, w, &config.grid, &config.config, ZeroCollapse::Auto)?;
    let (cv_fit, _) = swept.select_cv(k, w, config.alpha)?;
    let (oracle_fit, _) = swept.select_oracle(truth)?;
    let loss_cv = kl_divergence(truth, &cv_fit.p_hat)?;
    let loss_oracle = kl_divergence(truth, &oracle_fit.p_hat)?;
    Ok(ColumnRecord {
        column,
        scheme,
        n: k.total() as u64,
        zero_cells: k.zero_cells(),
        lambda_cv: cv_fit.lambda,
        lambda_oracle: oracle_fit.lambda,
        loss_cv,
        loss_oracle,
        efficacy: if loss_cv > 0.0 {
            loss_oracle / loss_cv
        } else {
            1.0
        },
        cv_failure: loss_cv > config.cv_failure_factor * loss_oracle,
    })
}

fn summarize(scheme: Scheme, records: &[ColumnRecord]) -> SchemeSummary {
    let pick = |f: fn(&ColumnRecord) -> f64| {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(f)
            .collect();
        FiveNumber::of(&v).expect("at least one column")
    };
    SchemeSummary {
        scheme,
        loss_cv: pick(|r| r.loss_cv),
        loss_oracle: pick(|r| r.loss_oracle),
        efficacy: pick(|r| r.efficacy),
        cv_failures: records
            .iter()
            .filter(|r| r.scheme == scheme && r.cv_failure)
            .count(),
    }
}

pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let truths = generate_truths(config)?;
    let column_sizes = split_total(
        config.n_total,
        config.s,
        config.split_concentration,
        config.seed,
    )?;
    let samples: Vec<CountVector> = truths
        .compositions
        .iter()
        .zip(&column_sizes)
        .enumerate()
        .map(|(x, (p, &n))| {
            let mut rng = stream(config.seed, streams::COLUMN_SAMPLES + x as u64);
            sample_multinomial(p, n, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut collapsed = vec![0.0; config.m];
    for k in &samples {
        for (acc, v) in collapsed.iter_mut().zip(k.as_slice()) {
            *acc += v;
        }
    }
    let options = EstimateOptions {
        alpha: config.alpha,
        grid: config.grid.clone(),
        config: config.config,
        ..EstimateOptions::default()
    };
    let prior = sscomp(&CountVector::new(collapsed)?, None, &options)?;
    let prior_w = BaseMeasure::from(prior.composition());
    let uniform_w = BaseMeasure::uniform(config.m)?;

    let jobs: Vec<(Scheme, usize)> = [Scheme::Uniform, Scheme::Prior]
        .into_iter()
        .flat_map(|scheme| (0..config.s).map(move |x| (scheme, x)))
        .collect();
    let records: Vec<ColumnRecord> = jobs
        .par_iter()
        .map(|&(scheme, x)| {
            let w = match scheme {
                Scheme::Uniform => &uniform_w,
                Scheme::Prior => &prior_w,
            };
            fit_column(x, scheme, &samples[x], w, &truths.compositions[x], config).map_err(|e| {
                Error::Column {
                    column: x,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<_>>()?;

    let summaries = vec![
        summarize(Scheme::Uniform, &records),
        summarize(Scheme::Prior, &records),
    ];
    Ok(StudyReport {
        config: config.clone(),
        column_sizes,
        prior_lambda: prior.fit.lambda,
        cv_failure_rule: format!("L(lambda_v) > {} * L(lambda_o)", config.cv_failure_factor),
        records,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_conserves_total() {
        for seed in 0..20 {
            let sizes = split_total(10_000, 50, 25.0, seed).unwrap();
            assert_eq!(sizes.iter().sum::<u64>(), 10_000);
            assert!(sizes.iter().all(|&n| n > 0));
        }
        assert_eq!(split_total(77, 1, 25.0, 3).unwrap(), vec![77]);
        let tight = split_total(5, 5, 0.1, 9).unwrap();
        assert_eq!(tight, vec![1; 5]);
        assert!(split_total(3, 5, 25.0, 1).is_err());
    }

    #[test]
    fn multinomial_single_draw() {
        let p = Composition::new(vec![0.2, 0.3, 0.5]).unwrap();
        let mut rng = stream(5, 0);
        for _ in 0..50 {
            let k = sample_multinomial(&p, 1, &mut rng).unwrap();
            assert_eq!(k.total(), 1.0);
            assert_eq!(k.as_slice().iter().filter(|&&c| c == 1.0).count(), 1);
        }
    }

    #[test]
    fn multinomial_concentrates() {
        let p = Composition::new(vec![0.999, 0.0005, 0.0005]).unwrap();
        let mut rng = stream(5, 1);
        let k = sample_multinomial(&p, 10_000, &mut rng).unwrap();
        assert_eq!(k.total(), 10_000.0);
        assert!(k.as_slice()[0] > 9_950.0);
    }

    #[test]
    fn truths_are_compositions_and_deterministic() {
        let config = StudyConfig {
            m: 10,
            s: 4,
            ..StudyConfig::default()
        };
        let a = generate_truths(&config).unwrap();
        let b = generate_truths(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.compositions.len(), 4);
        for p in &a.compositions {
            assert!(p.as_slice().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn tiny_noise_makes_columns_equal() {
        let config = StudyConfig {
            m: 8,
            s: 3,
            sigma2_between: 1e-24,
            ..StudyConfig::default()
        };
        let t = generate_truths(&config).unwrap();
        for p in &t.compositions[1..] {
            for (a, b) in p.as_slice().iter().zip(t.compositions[0].as_slice()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = StudyConfig {
            m: 1,
            ..StudyConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = StudyConfig {
            n_total: 10,
            s: 20,
            ..StudyConfig::default()
        };
        assert!(run_study(&bad).is_err());
        let bad = StudyConfig {
            sigma2_between: 0.0,
            ..StudyConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn smoke_study() {
        let config = StudyConfig {
            m: 5,
            s: 1,
            n_total: 50,
            seed: 11,
            ..StudyConfig::default()
        };
        let report = run_study(&config).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.column_sizes, vec![50]);
        for r in &report.records {
            assert!(r.efficacy > 0.0 && r.efficacy <= 1.0);
        }
        assert_eq!(report.tidy_rows().len(), 4);
    }
}
