use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fxdist_cli::commands::{self, LoadedConfig, DEFAULT_DTS};
use fxdist_cli::CliError;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fxdist", version, about = "Fixed-time distributed optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON scenario file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario (example1, example1_scaled, example2, pl_least_squares).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for the random initial state.
    #[arg(long)]
    seed: Option<u64>,
    /// Record every N-th step.
    #[arg(long)]
    stride: Option<usize>,
    /// Worker threads for sweeps.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario.
    Run(Common),
    /// Rerun the scenario for a grid of exponent pairs.
    SweepExponents {
        #[command(flatten)]
        common: Common,
        /// `high:low` pairs, comma separated.
        #[arg(long)]
        grid: Option<String>,
        /// Gradient-sum level whose crossing time is compared.
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
    },
    /// Rerun the scenario for several step sizes.
    SweepDt {
        #[command(flatten)]
        common: Common,
        /// Comma-separated step sizes.
        #[arg(long)]
        dts: Option<String>,
        /// Override the simulated horizon.
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Print settling-time bounds and the gain check.
    Bounds(Common),
}

fn load(c: &Common) -> Result<LoadedConfig, CliError> {
    commands::load(c.config.as_deref(), c.preset.as_deref(), c.seed, c.stride)
}

fn print<T: Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run(c) => print(&commands::cmd_run(&load(&c)?, &c.out)?),
        Command::Bounds(c) => print(&commands::cmd_bounds(&load(&c)?)?),
        Command::SweepExponents { common, grid, threshold } => {
            let grid = match grid {
                Some(g) => commands::parse_grid(&g)?,
                None => commands::default_exponent_grid(),
            };
            let cfg = load(&common)?;
            print(&commands::cmd_sweep_exponents(&cfg, &grid, threshold, &common.out, common.workers)?)
        }
        Command::SweepDt { common, dts, horizon } => {
            let dts = match dts {
                Some(d) => commands::parse_dts(&d)?,
                None => DEFAULT_DTS.to_vec(),
            };
            let mut cfg = load(&common)?;
            if let Some(h) = horizon {
                cfg.resolved.horizon = h;
            }
            print(&commands::cmd_sweep_dt(&cfg, &dts, &common.out, common.workers)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = e.report();
            match serde_json::to_string(&report) {
                Ok(s) => eprintln!("{s}"),
                Err(_) => eprintln!("{e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
