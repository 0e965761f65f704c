//! `viscotomo`: batch front end for phantom synthesis, forward modeling,
//! noise injection, inversion, dispersion tables and scoring.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Failure, Overrides};

#[derive(Parser, Debug)]
#[command(name = "viscotomo", version, about = "Visco-acoustic frequency-domain modeling and inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run configuration (`[section]` / `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Seed for the phantom realization or the noise stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Signal-to-noise ratio in dB for `noise`.
    #[arg(long = "snr-db", allow_negative_numbers = true)]
    snr_db: Option<f64>,
    /// Ground-truth grid used for scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output path, overriding `[output] path`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a layered phantom grid.
    Phantom(Common),
    /// Synthesize receiver data on a grid.
    Forward(Common),
    /// Add white Gaussian noise to a data file.
    Noise(Common),
    /// Reconstruct a medium from observed data.
    Invert(Common),
    /// Tabulate quality factor against frequency.
    Dispersion(Common),
    /// Score a reconstruction against a reference grid.
    Error(Common),
}

fn thread_limit() -> Result<Option<usize>, Failure> {
    match std::env::var("VISCOTOMO_THREADS") {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Config(format!("VISCOTOMO_THREADS must be a non-negative integer, got {v:?}"))),
    }
}

type Handler = fn(&config::Config, &Overrides) -> Result<(), Failure>;

fn run(cli: Cli) -> Result<(), Failure> {
    viscotomo::solver::set_thread_limit(thread_limit()?);
    let (cmd, common): (Handler, Common) = match cli.command {
        Command::Phantom(c) => (commands::phantom, c),
        Command::Forward(c) => (commands::forward, c),
        Command::Noise(c) => (commands::noise, c),
        Command::Invert(c) => (commands::invert, c),
        Command::Dispersion(c) => (commands::dispersion, c),
        Command::Error(c) => (commands::error, c),
    };
    let cfg = config::Config::load(&common.config)?;
    let overrides = Overrides {
        seed: common.seed,
        snr_db: common.snr_db,
        truth: common.truth,
        out: common.out,
    };
    cmd(&cfg, &overrides)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
