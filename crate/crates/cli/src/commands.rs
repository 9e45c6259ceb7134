use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use compost::selection::{GridRecord, DEFAULT_ALPHA};
use compost::sim::{run_study, Scheme, StudyConfig};
use compost::{
    sscomp, sscomp2, BaseMeasure, CountMatrix, CountVector, EstimateOptions, LambdaGrid,
};

use crate::error::CliError;
use crate::io::{read_table, render_table, write_atomic, Table};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "compost",
    version,
    about = "Composition estimation from count data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate one composition from a column of counts.
    Estimate(EstimateArgs),
    /// Estimate every column of a cells × samples count table.
    EstimateMatrix(MatrixArgs),
    /// Run the replication study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Smallest log10(λ) on the search grid.
    #[arg(long, default_value_t = -6.0, allow_negative_numbers = true)]
    pub grid_min: f64,
    /// Largest log10(λ) on the search grid.
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub grid_max: f64,
    #[arg(long, default_value_t = 0.1)]
    pub grid_step: f64,
}

impl GridArgs {
    fn grid(&self) -> Result<LambdaGrid, CliError> {
        Ok(LambdaGrid::span(
            self.grid_min,
            self.grid_max,
            self.grid_step,
        )?)
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Base measure, one positive value per cell. Uniform when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// `auto` for cross-validation, or a fixed positive value.
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    pub lambda: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Column to use from a multi-column input: 0-based index or header name.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    #[arg(long, default_value_t = 50)]
    pub s: usize,
    /// Total count split across the samples.
    #[arg(long = "N", default_value_t = 10_000)]
    pub n_total: u64,
    #[arg(long, default_value_t = 20_240_601)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Between-sample variance of the log-density perturbations.
    #[arg(long, default_value_t = 0.25)]
    pub sigma2: f64,
    #[arg(long)]
    pub output: PathBuf,
    /// Tidy per-column loss table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Estimate(args) => estimate(&args),
        Command::EstimateMatrix(args) => estimate_matrix(&args),
        Command::Simulate(args) => simulate(&args),
    }
}

fn parse_lambda(text: &str) -> Result<Option<f64>, CliError> {
    if text.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    let value: f64 = text.parse().map_err(|_| {
        CliError::Usage(format!("--lambda expects `auto` or a number, got {text:?}"))
    })?;
    if !(value > 0.0 && value.is_finite()) {
        return Err(CliError::Validation(format!(
            "--lambda must be positive, got {value}"
        )));
    }
    Ok(Some(value))
}

fn select_column(table: &Table, column: Option<&str>, path: &Path) -> Result<Vec<f64>, CliError> {
    let n = table.n_columns();
    let index = match column {
        None if n == 1 => 0,
        // A single row of values is one sample written horizontally.
        None if table.rows.len() == 1 => return Ok(table.rows[0].clone()),
        None => {
            return Err(CliError::Usage(format!(
                "{} has {n} columns; choose one with --column",
                path.display()
            )))
        }
        Some(c) => match c.parse::<usize>() {
            Ok(i) if i < n => i,
            Ok(i) => {
                return Err(CliError::Usage(format!(
                    "--column {i} out of range (0..{n})"
                )))
            }
            Err(_) => table
                .column_names()
                .and_then(|names| names.iter().position(|h| h == c))
                .ok_or_else(|| CliError::Usage(format!("no column named {c:?}")))?,
        },
    };
    Ok(table.column(index))
}

fn write_summary<T: Serialize>(path: Option<&Path>, summary: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct LambdaReport {
    value: f64,
    log10: f64,
    selected_by: &'static str,
}

#[derive(Serialize)]
struct EstimateSummary<'a> {
    schema_version: u32,
    command: &'static str,
    m: usize,
    total_count: f64,
    zero_cells: usize,
    lambda: LambdaReport,
    alpha: f64,
    zero_collapse_used: bool,
    iterations: usize,
    final_gradient_norm: f64,
    objective_value: f64,
    cv_trace: &'a [GridRecord],
}

fn estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let lambda = parse_lambda(&args.lambda)?;
    let table = read_table(&args.input)?;
    let k = CountVector::new(select_column(&table, args.column.as_deref(), &args.input)?)?;
    let w = match &args.weights {
        Some(path) => {
            let wt = read_table(path)?;
            Some(BaseMeasure::new(select_column(&wt, None, path)?)?)
        }
        None => None,
    };
    let options = EstimateOptions {
        alpha: args.alpha,
        grid: args.grid.grid()?,
        lambda,
        ..EstimateOptions::default()
    };
    let est = sscomp(&k, w.as_ref(), &options)?;

    let rows: Vec<Vec<f64>> = est
        .composition()
        .as_slice()
        .iter()
        .map(|&p| vec![p])
        .collect();
    let labels = table
        .row_labels
        .as_deref()
        .filter(|l| l.len() == rows.len());
    // Labelled output needs a header, or its first row would read as one.
    let header = labels.map(|_| {
        let first = table.header.as_ref().and_then(|h| h.first()).cloned();
        vec![first.unwrap_or_else(|| "cell".into()), "composition".into()]
    });
    write_atomic(
        &args.output,
        render_table(&rows, header.as_deref(), labels, table.delimiter).as_bytes(),
    )?;

    let summary = EstimateSummary {
        schema_version: SCHEMA_VERSION,
        command: "estimate",
        m: k.len(),
        total_count: k.total(),
        zero_cells: est.zero_cells,
        lambda: LambdaReport {
            value: est.fit.lambda,
            log10: est.fit.lambda.log10(),
            selected_by: if lambda.is_some() {
                "fixed"
            } else {
                "cross_validation"
            },
        },
        alpha: args.alpha,
        zero_collapse_used: est.zero_collapse_used,
        iterations: est.fit.iterations,
        final_gradient_norm: est.fit.final_gradient_norm,
        objective_value: est.fit.objective_value,
        cv_trace: &est.trace.records,
    };
    write_summary(args.summary.as_deref(), &summary)
}

#[derive(Serialize)]
struct ColumnSummary {
    index: usize,
    name: Option<String>,
    total_count: f64,
    zero_cells: usize,
    lambda: f64,
    log10_lambda: f64,
    iterations: usize,
    /// Advisory KL(prior ‖ column estimate).
    kl_from_prior: f64,
}

#[derive(Serialize)]
struct MatrixSummary {
    schema_version: u32,
    command: &'static str,
    m: usize,
    s: usize,
    alpha: f64,
    prior: LambdaReport,
    prior_iterations: usize,
    columns: Vec<ColumnSummary>,
}

fn estimate_matrix(args: &MatrixArgs) -> Result<(), CliError> {
    let table = read_table(&args.input)?;
    let names = table.column_names();
    let counts = CountMatrix::from_rows(&table.rows).map_err(|e| match (&e, &names) {
        (compost::Error::ZeroColumn { column }, Some(n)) if *column < n.len() => {
            CliError::Validation(format!("column {:?} has zero total", n[*column]))
        }
        _ => e.into(),
    })?;
    let options = EstimateOptions {
        alpha: args.alpha,
        grid: args.grid.grid()?,
        ..EstimateOptions::default()
    };
    let est = sscomp2(&counts, &options)?;

    write_atomic(
        &args.output,
        render_table(
            &est.matrix.rows(),
            table.header.as_deref(),
            table.row_labels.as_deref(),
            table.delimiter,
        )
        .as_bytes(),
    )?;

    let columns = est
        .columns
        .iter()
        .enumerate()
        .map(|(j, c)| ColumnSummary {
            index: j,
            name: names.as_ref().and_then(|n| n.get(j).cloned()),
            total_count: counts.column(j).total(),
            zero_cells: c.estimate.zero_cells,
            lambda: c.estimate.fit.lambda,
            log10_lambda: c.estimate.fit.lambda.log10(),
            iterations: c.estimate.fit.iterations,
            kl_from_prior: c.kl_from_prior,
        })
        .collect();
    let summary = MatrixSummary {
        schema_version: SCHEMA_VERSION,
        command: "estimate-matrix",
        m: counts.n_cells(),
        s: counts.n_samples(),
        alpha: args.alpha,
        prior: LambdaReport {
            value: est.prior.fit.lambda,
            log10: est.prior.fit.lambda.log10(),
            selected_by: "cross_validation",
        },
        prior_iterations: est.prior.fit.iterations,
        columns,
    };
    write_summary(args.summary.as_deref(), &summary)
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    schema_version: u32,
    command: &'static str,
    #[serde(flatten)]
    report: &'a compost::sim::StudyReport,
}

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let config = StudyConfig {
        m: args.m,
        s: args.s,
        n_total: args.n_total,
        seed: args.seed,
        alpha: args.alpha,
        sigma2_between: args.sigma2,
        grid: args.grid.grid()?,
        ..StudyConfig::default()
    };
    let report = run_study(&config)?;
    let wrapped = SimulateReport {
        schema_version: SCHEMA_VERSION,
        command: "simulate",
        report: &report,
    };
    let mut json = serde_json::to_string_pretty(&wrapped).expect("report serializes");
    json.push('\n');
    write_atomic(&args.output, json.as_bytes())?;

    if let Some(csv_path) = &args.csv {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in report.tidy_rows() {
            writer.serialize(row).map_err(|e| CliError::Io {
                path: csv_path.display().to_string(),
                source: e.into(),
            })?;
        }
        let bytes = writer.into_inner().map_err(|e| CliError::Io {
            path: csv_path.display().to_string(),
            source: e.into_error(),
        })?;
        write_atomic(csv_path, &bytes)?;
    }

    for scheme in [Scheme::Uniform, Scheme::Prior] {
        let s = report.summary(scheme);
        eprintln!(
            "{:>7}: median L(cv) {:.4}, median L(oracle) {:.4}, cv failures {}",
            scheme.as_str(),
            s.loss_cv.median,
            s.loss_oracle.median,
            s.cv_failures
        );
    }
    Ok(())
}
