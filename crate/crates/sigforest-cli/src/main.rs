//! `sigforest`: fit isolation forests, score samples, export per-feature
//! anomaly signatures, and cluster the signatures of the top anomalies.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 invariant
//! violation (`--check`).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "sigforest",
    version,
    about = "Isolation-forest anomaly detection with per-feature anomaly signatures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an isolation forest and persist it as a versioned JSON model
    Fit(FitArgs),
    /// Score samples against a fitted model (CSV sorted most-anomalous first)
    Score(ScoreArgs),
    /// Export per-feature signature values and selection counts
    Signatures(SignaturesArgs),
    /// Cluster the signatures of the most anomalous samples
    Cluster(ClusterArgs),
    /// Normalize flux/uncertainty spectra into one feature CSV
    Featurize(FeaturizeArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Input dataset CSV (header row; first column is the row id)
    #[arg(long)]
    input: PathBuf,
    /// Rows sampled per tree; must be a power of two and is clamped to the
    /// dataset size
    #[arg(long, default_value_t = 1024)]
    subsample: usize,
    /// Number of trees in the ensemble
    #[arg(long, default_value_t = 3000)]
    trees: usize,
    /// Master seed; fixed seeds give bit-identical models
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the model JSON
    #[arg(long)]
    model_out: PathBuf,
    /// Treat every column as a feature and number the rows instead
    #[arg(long)]
    no_row_ids: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output CSV: row_id, score, expected_depth_mean
    #[arg(long)]
    out: PathBuf,
    /// Verify the per-tree depth identity over all scored rows
    #[arg(long)]
    check: bool,
    #[arg(long)]
    no_row_ids: bool,
}

#[derive(Args)]
#[command(group(ArgGroup::new("selection").required(true).args(["ids", "all"])))]
struct SignaturesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated row ids to export
    #[arg(long, value_delimiter = ',')]
    ids: Option<Vec<String>>,
    /// Export every row
    #[arg(long)]
    all: bool,
    /// Values CSV; counts/bundle/split exports are written next to it
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    check: bool,
    #[arg(long)]
    no_row_ids: bool,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Number of clusters
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Fraction of the dataset (lowest scores) to cluster
    #[arg(long, default_value_t = 0.10)]
    top_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 300)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Standardize signature columns before clustering
    #[arg(long)]
    standardize: bool,
    /// Prefix for assignments/profiles/report outputs
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long)]
    check: bool,
    #[arg(long)]
    no_row_ids: bool,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// Flux spectra CSV (wavelength header)
    #[arg(long, requires = "uncertainty", conflicts_with_all = ["input", "split_at"])]
    flux: Option<PathBuf>,
    /// Uncertainty spectra CSV (same wavelength header)
    #[arg(long, requires = "flux")]
    uncertainty: Option<PathBuf>,
    /// Combined CSV holding flux then uncertainty columns
    #[arg(long, requires = "split_at")]
    input: Option<PathBuf>,
    /// Number of flux columns in the combined CSV
    #[arg(long, requires = "input")]
    split_at: Option<usize>,
    /// Output feature CSV
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(message) = init_thread_pool() {
        eprintln!("error: {message}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Fit(args) => commands::fit(args),
        Command::Score(args) => commands::score(args),
        Command::Signatures(args) => commands::signatures(args),
        Command::Cluster(args) => commands::cluster(args),
        Command::Featurize(args) => commands::featurize(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(error: &sigforest::Error) -> u8 {
    use sigforest::Error;
    match error {
        Error::InvalidConfig(_) | Error::InvalidFraction(_) => 1,
        Error::InvariantViolation(_) => 3,
        _ => 2,
    }
}

/// Caps the rayon worker count from `SIGFOREST_THREADS`. Results do not
/// depend on the setting; it only bounds parallelism.
fn init_thread_pool() -> Result<(), String> {
    let raw = match std::env::var("SIGFOREST_THREADS") {
        Err(std::env::VarError::NotPresent) => return Ok(()),
        Err(e) => return Err(format!("SIGFOREST_THREADS: {e}")),
        Ok(raw) => raw,
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("SIGFOREST_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}
