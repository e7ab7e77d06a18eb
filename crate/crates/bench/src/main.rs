use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use malmm_bench::commands::{execute, Command};
use malmm_bench::BenchError;

/// Scaling, timing, ablation and verification runs for the streaming
/// memory-bank Q-Former.
#[derive(Debug, Parser)]
#[command(name = "malmm", version)]
struct Cli {
    /// JSON file whose keys override the subcommand's flags. A report
    /// written by an earlier run works too (its `config` is used).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report path; reports are appended. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Exit status for configuration problems, distinct from a failed check.
const CONFIG_ERROR: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command, cli.config.as_deref(), cli.out.as_deref()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e @ (BenchError::Usage(_) | BenchError::Json(_))) => {
            eprintln!("error: {e}\n\n{}", Cli::command().render_usage());
            ExitCode::from(CONFIG_ERROR)
        }
        Err(e @ BenchError::Core(malmm_core::Error::Config(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG_ERROR)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
