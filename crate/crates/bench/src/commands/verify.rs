//! Runs the oracle and property suite for every requested seed.

use malmm_core::memory_bank::TieBreak;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::suite::{run_all, CheckResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, clap::Args)]
pub struct VerifyArgs {
    /// Seeds to run, each a full independent suite. Defaults to the
    /// `MALMM_SEED` seed.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Random compression instances per seed for the oracle checks.
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    /// Make the production bank break similarity ties toward the latest
    /// pair, which the oracle checks should catch.
    #[arg(long)]
    #[serde(default)]
    pub mutate_tie_break: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub seeds: Vec<u64>,
    pub instances: usize,
    pub mutate_tie_break: bool,
    pub checks: Vec<CheckResult>,
}

pub fn run(args: &VerifyArgs) -> Result<VerifyReport> {
    if args.instances == 0 {
        return Err(BenchError::Usage("--instances must be >= 1".into()));
    }
    let tie_break = if args.mutate_tie_break { TieBreak::Latest } else { TieBreak::Earliest };
    let seeds = if args.seeds.is_empty() { vec![crate::default_seed()] } else { args.seeds.clone() };
    let checks: Vec<CheckResult> = seeds
        .iter()
        .flat_map(|&seed| run_all(seed, args.instances, tie_break))
        .collect();
    Ok(VerifyReport {
        passed: checks.iter().all(CheckResult::passed),
        seeds,
        instances: args.instances,
        mutate_tie_break: args.mutate_tie_break,
        checks,
    })
}
