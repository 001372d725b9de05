//! `projclust`: Bayesian projection clustering of longitudinal data.
//!
//! Exit status: 0 success, 2 validation error, 3 numerical error, 4 I/O error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "projclust", version, about = "Bayesian clustering by predictive projection of random effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration (see docs/config.md).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; replaces `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; replaces `output` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Number of clusters; replaces `k` and any `selection` in the config.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Shared random-effect columns: `all`, `low:a..b`, `mid:a..b`,
    /// `high:a..b` or 0-based indices such as `0,1,2`.
    #[arg(long, global = true)]
    shared: Option<String>,

    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the four-group synthetic cosine dataset.
    Simulate,
    /// Fit the mixed model by Gibbs sampling and write the draw file.
    Fit,
    /// Project every draw onto K clusters; write partitions and coincidences.
    Cluster,
    /// Compute the KL and bootstrap selection curves and the chosen K.
    SelectK,
    /// Rand and adjusted Rand indices of the partitions against labels.
    Evaluate,
    /// Replace each series by its power spectrum.
    Spectrum,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        k: cli.k,
        shared: cli.shared.clone(),
    });
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Io(format!("starting worker pool: {e}")))?;
    let force = cli.force;
    pool.install(|| match cli.command {
        Command::Simulate => commands::simulate(&cfg, force),
        Command::Fit => commands::fit(&cfg, force),
        Command::Cluster => commands::cluster(&cfg, force),
        Command::SelectK => commands::select_k(&cfg, force),
        Command::Evaluate => commands::evaluate(&cfg, force),
        Command::Spectrum => commands::spectrum(&cfg, force),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("projclust: {e}");
            e.exit_code()
        }
    }
}
