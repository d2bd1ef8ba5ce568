//! `lasir`: basis construction, simulation, fitting, selection, inference,
//! evaluation and the cube study from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "lasir", version, about = "Latent-subgroup image-on-scalar regression")]
pub struct Cli {
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an orthonormal kernel basis on a lattice.
    Basis(BasisArgs),
    /// Draw a synthetic cube dataset with ground truth.
    Simulate(SimulateArgs),
    /// Fit a subgroup model (or a baseline) to a dataset.
    Fit(FitArgs),
    /// Choose the number of subgroups by BIC.
    Select(SelectArgs),
    /// Voxelwise Wald maps with BH control.
    Infer(InferArgs),
    /// Score fits against ground truth.
    Metrics(MetricsArgs),
    /// Holdout prediction error under the projection protocols.
    Validate(ValidateArgs),
    /// Rerun a replicated experiment.
    #[command(subcommand)]
    Reproduce(Reproduce),
}

#[derive(Debug, Args, Serialize)]
pub struct BasisArgs {
    /// Cube side `M` or `XxYxZ`; ignored when --lattice is given.
    #[arg(long, default_value = "15")]
    pub dims: String,
    /// Take the lattice (dims and mask) from an existing volume bundle.
    #[arg(long)]
    pub lattice: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub a: f64,
    #[arg(long, default_value_t = 2.0)]
    pub b: f64,
    /// Highest total Hermite degree.
    #[arg(long, conflicts_with_all = ["h_ref", "r0"], required_unless_present = "r0")]
    pub h: Option<usize>,
    /// Reference degree for choosing `h` by variance contribution.
    #[arg(long, requires = "r0")]
    pub h_ref: Option<usize>,
    /// Target variance contribution (with --h-ref).
    #[arg(long, requires = "h_ref")]
    pub r0: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// TOML file of simulation settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cube side.
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving images, covariates, truth and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Inputs shared by commands that read a dataset.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Image volume bundle header.
    #[arg(long)]
    pub images: PathBuf,
    /// Covariate CSV (`id,site,x_*,z_*`).
    #[arg(long)]
    pub covariates: PathBuf,
    /// Basis bundle from `lasir basis`.
    #[arg(long)]
    pub basis: PathBuf,
}

/// Stochastic-EM settings; unset values keep the library defaults.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct SemArgs {
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value = "lasir", value_parser = ["lasir", "kmlr", "svcm"])]
    pub method: String,
    #[command(flatten)]
    pub sem: SemArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 4)]
    pub k_max: usize,
    #[command(flatten)]
    pub sem: SemArgs,
    /// Save the selected fit here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fit bundle from `lasir fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// FDR level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    /// Fit bundles, one per replicate.
    #[arg(long, required = true, num_args = 1..)]
    pub fit: Vec<PathBuf>,
    /// Ground-truth bundles in the same order.
    #[arg(long, required = true, num_args = 1..)]
    pub truth: Vec<PathBuf>,
    #[arg(long)]
    pub basis: PathBuf,
    /// Image bundles (with --covariates) enable power and Type-I columns.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub covariates: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fit whose labels stratify the splits.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub splits: usize,
    #[arg(long, default_value_t = 0.05)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "all", value_parser = ["all", "within", "without", "shuffled"])]
    pub mode: String,
}

#[derive(Debug, Subcommand)]
pub enum Reproduce {
    /// Cube study comparing the subgroup fit with k-means and single-group fits.
    Table2(Table2Args),
}

#[derive(Debug, Args, Serialize)]
pub struct Table2Args {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Cube side.
    #[arg(long, default_value_t = 15)]
    pub dims: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Analysis basis degree.
    #[arg(long, default_value_t = 12)]
    pub h: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value = "table2")]
    pub out_dir: PathBuf,
}

/// The error chain joined by ": ", dropping causes already spelled out by
/// the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // usage errors exit 2, --help and --version exit 0
        Err(e) => e.exit(),
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let threads = cli.threads;
    match lasir::parallel::with_threads(threads, || commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
