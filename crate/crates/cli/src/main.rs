use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riescomp_cli::{execute, Command};

#[derive(Parser)]
#[command(name = "riescomp", version, about = "Riemannian stochastic compositional optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every configured (algorithm, seed) pair and write metric CSVs.
    Run { config: PathBuf },
    /// Check adjoints and gradients of the configured problem.
    GradCheck { config: PathBuf },
    /// Fit the convergence-rate slope over several horizons.
    Rate { config: PathBuf },
    /// Write the configured policy-evaluation instance as JSON.
    GenInstance { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, path) = match cli.command {
        Cmd::Run { config } => (Command::Run, config),
        Cmd::GradCheck { config } => (Command::GradCheck, config),
        Cmd::Rate { config } => (Command::Rate, config),
        Cmd::GenInstance { config } => (Command::GenInstance, config),
    };
    match execute(command, &path) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
