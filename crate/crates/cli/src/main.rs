use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use horizonlab_cli::config::{ExperimentConfig, Overrides, ResolvedConfig};
use horizonlab_cli::{run, CliError, EXIT_OK};

/// Batch verifier for infinite-horizon optimal control experiments.
#[derive(Parser, Debug)]
#[command(name = "horizonlab", version)]
struct Args {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// value, limits, pmp, criteria, regularity, example-suite or plot-data.
    #[arg(long)]
    task: Option<String>,
    /// Built-in problem name (overrides the config).
    #[arg(long)]
    problem: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tolerance for limits and criteria; must be positive.
    #[arg(long, allow_hyphen_values = true)]
    tol: Option<f64>,
    /// Grid as "h,dt,T".
    #[arg(long)]
    grid: Option<String>,
    /// Geometric horizons as "t0,ratio,count".
    #[arg(long)]
    horizons: Option<String>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(text) = std::env::var("HORIZONLAB_THREADS") else { return Ok(()) };
    let n: usize = text
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("HORIZONLAB_THREADS must be a positive integer, got '{text}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Validation(e.to_string()))
}

fn main_inner(args: Args) -> Result<PathBuf, CliError> {
    configure_threads()?;
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        problem: args.problem,
        task: args.task,
        out: args.out,
        seed: args.seed,
        tol: args.tol,
        grid: args.grid,
        horizons: args.horizons,
    };
    let resolved = ResolvedConfig::resolve(cfg, overrides)?;
    let inputs: Vec<PathBuf> = args.config.into_iter().collect();
    run(&resolved, &inputs)
}

fn main() -> ExitCode {
    match main_inner(Args::parse()) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::from(EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
