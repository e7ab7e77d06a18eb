//! Harness around `malmm_core`: scaling and timing sweeps, training
//! ablations, a bank-length sweep, and the oracle/property verification
//! suite. `main.rs` is a thin clap front end over [`commands`].

pub mod commands;
mod error;
pub mod options;
pub mod report;
pub mod suite;

pub use error::{BenchError, Result};

/// Environment variable holding the default seed.
pub const SEED_ENV: &str = "MALMM_SEED";

/// `MALMM_SEED` if set and numeric, else 0.
pub fn default_seed() -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok()).unwrap_or(0)
}
