//! Median wall-clock per stream length and a least-squares line through it.

use serde::{Deserialize, Serialize};

use super::scaling::{model_for, random_stream_spec, run_once};
use crate::error::{BenchError, Result};
use crate::options::{strictly_increasing, ModelShape};
use crate::report::{linear_fit, median, LinearFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, clap::Args)]
pub struct TimingArgs {
    #[arg(long, default_value = "mbc")]
    pub policy: String,
    #[arg(long, value_delimiter = ',', default_value = "50,100,200,400")]
    pub frames_list: Vec<usize>,
    /// Timed runs per length, at least 3.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: ModelShape,
    #[arg(long, default_value_t = crate::default_seed())]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub policy: String,
    pub frames: usize,
    pub bank_size: usize,
    pub queries: usize,
    pub tokens: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub seed: u64,
    pub repeats: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Every sample, `;`-separated, in run order.
    pub samples_ms: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingSummary {
    /// Median milliseconds against T.
    pub fit: LinearFit,
    /// `median(T[i+1]) / median(T[i])` for consecutive lengths.
    pub ratios: Vec<f64>,
}

pub fn run(args: &TimingArgs) -> Result<(Vec<TimingRow>, TimingSummary)> {
    strictly_increasing("frames-list", &args.frames_list)?;
    if args.repeats < 3 {
        return Err(BenchError::Usage(format!("--repeats must be >= 3, got {}", args.repeats)));
    }
    let (config, params) = model_for(&args.shape, &args.policy, args.seed)?;
    let specs: Vec<_> = args
        .frames_list
        .iter()
        .map(|&t| random_stream_spec(args.seed, t, &args.shape))
        .collect();
    // one untimed pass warms caches and the allocator
    run_once(&config, &params, &specs[0])?;
    let mut samples = vec![Vec::with_capacity(args.repeats); specs.len()];
    // repeats interleave across lengths so drift hits every length alike
    for _ in 0..args.repeats {
        for (spec, out) in specs.iter().zip(samples.iter_mut()) {
            out.push(run_once(&config, &params, spec)?.wall_clock_ns as f64 / 1e6);
        }
    }
    let s = &args.shape;
    let rows: Vec<TimingRow> = args
        .frames_list
        .iter()
        .zip(&samples)
        .map(|(&frames, xs)| TimingRow {
            policy: args.policy.clone(),
            frames,
            bank_size: s.bank_size,
            queries: s.queries,
            tokens: s.tokens,
            channels: s.channels,
            blocks: s.blocks,
            heads: s.heads,
            seed: args.seed,
            repeats: args.repeats,
            median_ms: median(xs),
            min_ms: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: xs.iter().copied().fold(0.0, f64::max),
            samples_ms: xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(";"),
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.frames as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_ms).collect();
    let summary = TimingSummary {
        fit: linear_fit(&xs, &ys),
        ratios: ys.windows(2).map(|w| w[1] / w[0]).collect(),
    };
    Ok((rows, summary))
}
