//! `kakinuma-lab`: runs simulations, consistency sweeps and diagnostics from
//! an INI configuration and writes CSV/JSON results with a manifest.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::{CliError, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "kakinuma-lab", version, about = "Two-layer Kakinuma model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Seed for randomized initial modes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the Kakinuma model and record diagnostics.
    Simulate(Common),
    /// Solve for the Kakinuma potentials from (zeta, phi).
    PrepareInit(Common),
    /// Residual and Hamiltonian errors over a delta sweep.
    Consistency(Common),
    /// Kakinuma and full-model Hamiltonians at one state.
    Hamiltonian(Common),
    /// Linear dispersion symbols of both models.
    Dispersion(Common),
    /// Non-cavitation and stability diagnostics at one state.
    StabilityReport(Common),
}

fn run(command: Command) -> Result<i32, CliError> {
    let (common, f): (Common, fn(&Context) -> Result<i32, CliError>) = match command {
        Command::Simulate(c) => (c, commands::cmd_simulate),
        Command::PrepareInit(c) => (c, commands::cmd_prepare_init),
        Command::Consistency(c) => (c, commands::cmd_consistency),
        Command::Hamiltonian(c) => (c, commands::cmd_hamiltonian),
        Command::Dispersion(c) => (c, commands::cmd_dispersion),
        Command::StabilityReport(c) => (c, commands::cmd_stability_report),
    };
    if common.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let raw = std::fs::read_to_string(&common.config).map_err(|e| CliError::io(&common.config, e))?;
    let cfg = RunConfig::parse(&raw)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
    let ctx = Context { cfg: &cfg, raw: &raw, seed: common.seed, out };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| f(&ctx))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
