//! `core-ood`: calibrate, evaluate and sweep post-hoc OOD scorers over feature dumps.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use core_ood::error::ErrorClass;

#[derive(Parser)]
#[command(name = "core-ood", version, about = "Post-hoc OOD scoring toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic benchmark (NPY files + manifest).
    Synth(SynthArgs),
    /// Fit a scorer on the manifest's calibration split and persist it.
    Calibrate(CalibrateArgs),
    /// Evaluate scorers on every OOD set of a manifest.
    Eval(EvalArgs),
    /// Sensitivity sweeps (alpha, budget, ablation, combination, normalization, confidence).
    Sweep(SweepArgs),
    /// ID-vs-OOD residual alignment gap with bootstrap CI and Welch test.
    NcVerify(NcArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    calib_per_class: usize,
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
    #[arg(long, default_value_t = 1000)]
    ood_per_type: usize,
    #[arg(long, default_value_t = 20.0)]
    conf_mean: f64,
    #[arg(long, default_value_t = 16.0)]
    residual_strength: f64,
    /// Std of the angle (radians) splitting the norm budget between logit and residual.
    #[arg(long, default_value_t = 0.2)]
    split_jitter: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.3)]
    low_conf_factor: f64,
}

/// CORE fusion settings and baseline hyper-parameters.
#[derive(Args, Clone)]
struct ScorerOpts {
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value = "zscore")]
    norm: String,
    #[arg(long, value_enum, default_value_t = CombineArg::Sum)]
    combine: CombineArg,
    /// Softmin temperature (only with --combine softmin).
    #[arg(long)]
    tau: Option<f64>,
    /// With --combine max: take the larger ID-ness score instead of the smaller.
    #[arg(long)]
    argwise_max: bool,
    /// Confidence signal: energy, msp or maxlogit.
    #[arg(long, default_value = "energy")]
    conf: String,
    /// Fit residual directions on all labelled samples, not only correct ones.
    #[arg(long)]
    all_labeled: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    vim_dim: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CombineArg {
    Sum,
    Softmin,
    Max,
}

#[derive(Args, Clone)]
struct BudgetOpts {
    /// Fraction of each class's calibration samples to use.
    #[arg(long, conflicts_with = "per_class")]
    budget: Option<f64>,
    /// Fixed number of calibration samples per class.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "core")]
    scorer: String,
    /// Directory receiving the fitted state.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing state.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    scorer_opts: ScorerOpts,
    #[command(flatten)]
    budget: BudgetOpts,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Markdown,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated scorers fitted on the fly.
    #[arg(long, value_delimiter = ',')]
    scorer: Vec<String>,
    /// Previously calibrated state directories (repeatable).
    #[arg(long)]
    state: Vec<PathBuf>,
    /// Restrict to these OOD sets (comma-separated names).
    #[arg(long, value_delimiter = ',')]
    ood: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
    #[command(flatten)]
    scorer_opts: ScorerOpts,
    #[command(flatten)]
    budget: BudgetOpts,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Alpha,
    Budget,
    Ablation,
    Combine,
    Norm,
    Conf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "sweep", value_enum)]
    kind: SweepKind,
    /// Comma-separated grid for alpha/budget sweeps; defaults to the preset.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, value_delimiter = ',')]
    ood: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    scorer_opts: ScorerOpts,
    #[command(flatten)]
    budget: BudgetOpts,
}

#[derive(Args)]
struct NcArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// OOD set to compare against the ID test set.
    #[arg(long, required_unless_present = "null")]
    ood: Option<String>,
    /// Compare two seeded halves of the ID test set instead.
    #[arg(long, conflicts_with = "ood")]
    null: bool,
    /// Core or membership state holding the residual directions; fitted if absent.
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long, default_value_t = core_ood::metrics::DEFAULT_N_BOOT)]
    n_boot: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    all_labeled: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    budget: BudgetOpts,
}

/// Invalid flag combination or value, detected before any I/O.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Requested input that the data does not contain.
#[derive(Debug)]
pub struct Missing(pub String);

impl fmt::Display for Missing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Missing {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<Missing>() || cause.is::<std::io::Error>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<core_ood::Error>() {
            return match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            };
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CORE_OOD_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Usage(format!("CORE_OOD_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::NcVerify(a) => commands::nc_verify(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
