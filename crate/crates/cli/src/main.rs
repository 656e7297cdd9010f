use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

/// Exact finite-sample confidence regions from perturbed datasets.
#[derive(Parser)]
#[command(name = "fsr", version)]
struct Cli {
    /// Worker threads for scans and coverage studies (results do not depend on it)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON file supplying values for flags not given on the command line
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen(commands::GenArgs),
    /// Test one parameter vector (exit 0 accept, 1 reject)
    Test(commands::TestArgs),
    /// Test every cell of a parameter box and label the accepted components
    Scan(commands::ScanArgs),
    /// Monte-Carlo coverage at the true parameter
    Coverage(commands::CoverageArgs),
    /// Reproduce the disconnected output-error confidence region
    ReproOe(commands::ReproArgs),
    /// Smallest eigenvalue of the excitation matrix of each permutation
    Excitation(commands::ExcitationArgs),
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global()?;
    }
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Gen(a) => commands::gen(a, cfg),
        Command::Test(a) => commands::test(a, cfg),
        Command::Scan(a) => commands::scan_cmd(a, cfg),
        Command::Coverage(a) => commands::coverage(a, cfg),
        Command::ReproOe(a) => commands::repro_oe(a, cfg, cli.jobs),
        Command::Excitation(a) => commands::excitation(a, cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
