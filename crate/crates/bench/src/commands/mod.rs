//! Subcommands. Each has an argument struct that doubles as its `--config`
//! schema and a `run` returning rows; [`execute`] writes the reports.
//!
//! Output files are append-only. CSV reports gain rows under a matching
//! header; JSON reports gain one object per line.

pub mod ablate;
pub mod banklen;
pub mod scaling;
pub mod timing;
pub mod verify;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::options::apply_config;
use crate::report::{append_csv, append_json, csv_string, RunReport};

#[derive(Debug, Clone, clap::Subcommand)]
pub enum Command {
    /// Token rows, KV rows and resident floats per stream length.
    Scaling(scaling::ScalingArgs),
    /// Median wall-clock per stream length plus a linear fit.
    Timing(timing::TimingArgs),
    /// Train and evaluate one model per aggregation policy.
    Ablate(ablate::AblateArgs),
    /// Eval accuracy against memory bank length.
    #[command(name = "banklen-sweep")]
    BanklenSweep(banklen::BanklenArgs),
    /// Oracle and property suite; exit 0 on pass, 1 on any failure.
    Verify(verify::VerifyArgs),
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn emit_csv<R: Serialize>(rows: &[R], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => append_csv(path, rows),
        None => {
            print!("{}", csv_string(rows)?);
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => append_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

/// Runs `command` after overlaying `config`, writing reports to `out` (or
/// stdout). Returns the process exit code for a run that completed.
pub fn execute(command: Command, config: Option<&Path>, out: Option<&Path>) -> Result<i32> {
    match command {
        Command::Scaling(args) => {
            let args = apply_config(args, config)?;
            emit_csv(&scaling::run(&args)?, out)?;
        }
        Command::Timing(args) => {
            let args = apply_config(args, config)?;
            let (rows, summary) = timing::run(&args)?;
            emit_csv(&rows, out)?;
            let report = RunReport::new("timing", &args, args.seed, vec![summary])?;
            match out {
                Some(path) => append_json(&sidecar(path, ".fit.json"), &report)?,
                None => eprintln!("{}", serde_json::to_string(&report)?),
            }
        }
        Command::Ablate(args) => {
            let args = apply_config(args, config)?;
            let rows = ablate::run(&args)?;
            emit_json(&RunReport::new("ablate", &args, args.seed, rows)?, out)?;
        }
        Command::BanklenSweep(args) => {
            let args = apply_config(args, config)?;
            let rows = banklen::run(&args)?;
            let points: Vec<_> = rows.iter().map(|r| r.point()).collect();
            emit_csv(&points, out)?;
            if let Some(path) = out {
                append_json(&sidecar(path, ".json"), &RunReport::new("banklen-sweep", &args, args.seed, rows)?)?;
            }
        }
        Command::Verify(args) => {
            let args = apply_config(args, config)?;
            let report = verify::run(&args)?;
            for c in &report.checks {
                eprintln!(
                    "{} {} seed={} instances={} failures={} max_error={:.3e}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.seed,
                    c.instances,
                    c.failures.len(),
                    c.max_error
                );
            }
            emit_json(&report, out)?;
            return Ok(if report.passed { 0 } else { 1 });
        }
    }
    Ok(0)
}
