// `!(a <= b)` is used on purpose so that NaN fails every check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RawConfig};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// 1: a check ran and failed.
    CheckFailed,
    /// 2: unreadable or invalid configuration or inputs.
    Config(String),
    /// 3: a run aborted or an output could not be written.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::CheckFailed => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "riemsgd", version, about = "Riemannian SGD experiments, checks and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; runs use seed, seed + 1, ...
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of iterations T.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment over all seeds.
    Run,
    /// Run one check: unbiasedness, confinement, kappa-confinement, lipschitz, schedule, gradient.
    Check { name: String },
    /// Aggregate the trajectory CSVs of a directory.
    Report {
        /// Directory with trajectory CSVs; defaults to --out or the config's run.out.
        dir: Option<PathBuf>,
        /// Gradient-norm threshold; defaults to the config's run.threshold or 1e-3.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn require_config(cli: &Cli) -> Result<&PathBuf, CliError> {
    cli.config.as_ref().ok_or_else(|| CliError::Config("--config PATH is required".into()))
}

/// `(run.out, run.threshold)` from a config file, without building the problem.
fn report_defaults(path: &PathBuf) -> Result<(Option<PathBuf>, Option<f64>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((raw.run.out, raw.run.threshold))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides { seed: cli.seed, out: cli.out.clone(), horizon: cli.horizon };
    match &cli.command {
        Command::Run => commands::cmd_run(require_config(cli)?, &overrides, cli.quiet),
        Command::Check { name } => commands::cmd_check(name, require_config(cli)?, &overrides, cli.quiet),
        Command::Report { dir, threshold } => {
            let (cfg_out, cfg_threshold) = match &cli.config {
                Some(path) => report_defaults(path)?,
                None => (None, None),
            };
            let dir = dir
                .clone()
                .or_else(|| cli.out.clone())
                .or(cfg_out)
                .ok_or_else(|| CliError::Config("report needs a directory, --out or --config".into()))?;
            let threshold = threshold.or(cfg_threshold).unwrap_or(1e-3);
            if !(threshold.is_finite() && threshold > 0.0) {
                return Err(CliError::Config("threshold must be > 0".into()));
            }
            commands::cmd_report(&dir, threshold, cli.quiet)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::CheckFailed => {}
                CliError::Config(msg) => eprintln!("config error: {msg}"),
                CliError::Runtime(msg) => eprintln!("runtime error: {msg}"),
            }
            ExitCode::from(e.code())
        }
    }
}
