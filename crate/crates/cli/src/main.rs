mod canonical;
mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use commands::{CliError, Outcome};

#[derive(Debug, Parser)]
#[command(name = "lowmach", about = "Low Mach limits, Young measures and Jensen tests", disable_version_flag = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    /// Configuration file (TOML, or JSON when the extension is `.json`).
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, short = 'o', global = true, default_value = ".")]
    pub output_dir: PathBuf,
    /// Seed for every randomised estimator.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker thread cap; `1` runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Validate the configuration and print the plan without computing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Print crate and schema versions.
    #[arg(long)]
    pub version: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the compressible solver and write snapshots.
    Simulate,
    /// Run an eps ladder and write the limit report.
    Ladder,
    /// Jensen test of a Young measure over (u, P).
    Jensen,
    /// Di-atomic determinant and wave-cone membership of two lifted states.
    Wavecone,
    /// Upper envelope estimates of a test function.
    Envelope,
    /// Relative energy against the steady vortex.
    RelativeEnergy,
    /// Weak-form residual of a solver run.
    Residual,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.version {
        print!("{}", commands::version_text());
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.command else {
        eprintln!("{}", CliError::validation("command", "no subcommand given; see --help").to_json());
        return ExitCode::from(2);
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("{}", CliError::validation("threads", "must be positive").to_json());
            return ExitCode::from(2);
        }
        if t == 1 {
            lowmach::par::set_sequential(true);
        }
        lowmach::par::init_threads(t);
    }
    match commands::dispatch(cmd, &cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("{}", CliError::check(msg).to_json());
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
