//! Command-line pipeline: simulate or load a survey, expand birth histories,
//! fit the spatio-temporal APC model, predict, compute direct estimates,
//! cross-validate and emit plot-ready reports.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use u5mr_core::temporal::ApcVariant;

mod cv;
mod direct;
mod fit;
mod output;
mod report;
mod simulate;

pub use output::{sha256_file, Outputs, MANIFEST};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "U5MR_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "u5mr",
    version,
    about = "Subnational under-five mortality estimation with a spatio-temporal age-period-cohort model",
    after_help = "Every subcommand writes its CSVs and a manifest.json (config echo, seed, versions, timings, \
                  SHA-256 digests) into --out. On failure the partial outputs are removed.\n\n\
                  Environment:\n  U5MR_THREADS  number of worker threads (default: all cores)"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand birth histories into person-month cells.
    Expand(ExpandArgs),
    /// Generate a synthetic population and draw a two-stage cluster survey.
    Simulate(SimulateArgs),
    /// Fit a model, sample the posterior and write estimates and predictions.
    Fit(FitArgs),
    /// Re-sample a fitted model at its hyperparameters over a new horizon.
    Predict(PredictArgs),
    /// Design-weighted direct estimates and a national Fay-Herriot smoother.
    Direct(DirectArgs),
    /// Leave-one-region-out cross-validation against direct estimates.
    Cv(CvArgs),
    /// Combine fit, direct and cv outputs into plot-ready long-format CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Variant {
    #[value(name = "AP")]
    #[serde(rename = "AP")]
    Ap,
    #[value(name = "AC")]
    #[serde(rename = "AC")]
    Ac,
    #[value(name = "APC")]
    #[serde(rename = "APC")]
    Apc,
}

impl Variant {
    pub fn model(self) -> ApcVariant {
        match self {
            Variant::Ap => ApcVariant::Ap,
            Variant::Ac => ApcVariant::Ac,
            Variant::Apc => ApcVariant::Apc,
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            Variant::Ap => "Age-Period",
            Variant::Ac => "Age-Cohort",
            Variant::Apc => "Age-Period-Cohort",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SamplingArgs {
    /// Number of posterior draws.
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    /// Random seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Model variant.
    #[arg(long, value_enum, default_value_t = Variant::Apc)]
    pub variant: Variant,
    /// Region adjacency file, one `region: neighbour,neighbour` line per region.
    #[arg(long)]
    pub adjacency: PathBuf,
    /// Stratum proportions CSV with columns period, region_id, q_rural, w_national.
    #[arg(long)]
    pub proportions: PathBuf,
    /// Model configuration file of `key = value` lines (priors, slopes, age values).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Estimation periods as FIRST:LAST (default: the data periods that the proportions cover).
    #[arg(long, value_parser = parse_periods)]
    pub periods: Option<(i32, i32)>,
    /// Maximum BFGS iterations for the hyperparameter search.
    #[arg(long, default_value_t = 200)]
    pub budget: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExpandArgs {
    /// Survey CSV of birth histories.
    pub survey: PathBuf,
    /// Adjacency file; when given, records from unknown regions are rejected.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// Keep only cells in FIRST:LAST.
    #[arg(long, value_parser = parse_periods)]
    pub periods: Option<(i32, i32)>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Population configuration file of `key = value` lines (default: Kenya-scale).
    #[arg(long)]
    pub population: Option<PathBuf>,
    /// Random seed; the population uses it and the survey uses seed + 1.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Clusters sampled per rural stratum.
    #[arg(long, default_value_t = 22)]
    pub rural_clusters: usize,
    /// Clusters sampled per urban stratum.
    #[arg(long, default_value_t = 13)]
    pub urban_clusters: usize,
    /// Households sampled per cluster.
    #[arg(long, default_value_t = 25)]
    pub households: u32,
    /// Keep true cluster coordinates.
    #[arg(long)]
    pub no_jitter: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Survey CSV of birth histories.
    pub survey: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Prediction horizon in years after the last estimation period.
    #[arg(long, default_value_t = 5)]
    pub horizon: u32,
    /// Integrate over hyperparameters with a central composite design instead
    /// of plugging in the optimum.
    #[arg(long)]
    pub ccd: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    /// Output directory of a previous `fit`.
    pub fit: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Prediction horizon in years after the last estimation period.
    #[arg(long, default_value_t = 5)]
    pub horizon: u32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DirectArgs {
    /// Survey CSV of birth histories.
    pub survey: PathBuf,
    /// Keep only periods in FIRST:LAST.
    #[arg(long, value_parser = parse_periods)]
    pub periods: Option<(i32, i32)>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Fay-Herriot prediction horizon in years.
    #[arg(long, default_value_t = 5)]
    pub horizon: u32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CvArgs {
    /// Survey CSV of birth histories.
    pub survey: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Held-out period (default: the last period with a defined direct estimate).
    #[arg(long)]
    pub holdout: Option<i32>,
    /// Re-optimise the hyperparameters in every refit.
    #[arg(long)]
    pub refit_hyper: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Output directories of fit, predict, direct and cv runs.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

fn parse_periods(s: &str) -> std::result::Result<(i32, i32), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected FIRST:LAST, got {s:?}"))?;
    let a: i32 = a
        .trim()
        .parse()
        .map_err(|_| format!("invalid year {a:?}"))?;
    let b: i32 = b
        .trim()
        .parse()
        .map_err(|_| format!("invalid year {b:?}"))?;
    if a > b {
        return Err(format!("empty period range {a}:{b}"));
    }
    Ok((a, b))
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code; diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match configure_threads().and_then(|()| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV}={value:?} is not a thread count"))?;
    if n == 0 {
        bail!("{THREADS_ENV} must be at least 1");
    }
    // A pool configured earlier in the process (tests, embedding) is kept.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Expand(a) => simulate::expand(&a),
        Command::Simulate(a) => simulate::simulate(&a),
        Command::Fit(a) => fit::fit(&a),
        Command::Predict(a) => fit::predict(&a),
        Command::Direct(a) => direct::direct(&a),
        Command::Cv(a) => cv::cv(&a),
        Command::Report(a) => report::report(&a),
    }
}

/// Fails early when an input path does not exist.
fn require_file(path: &std::path::Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist or is not a file", path.display());
    }
    Ok(())
}

fn require_dir(path: &std::path::Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!(
            "{what} {} does not exist or is not a directory",
            path.display()
        );
    }
    Ok(())
}
