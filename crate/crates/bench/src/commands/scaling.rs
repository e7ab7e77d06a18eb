//! Token count, KV rows and resident floats as the stream grows.

use malmm_core::pipeline::{generate_synthetic, run_stream, ModelConfig, ModelParams, Segment, StreamRun, SyntheticSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::options::{strictly_increasing, ModelShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, clap::Args)]
pub struct ScalingArgs {
    /// One of mbc, mbc_frame, fifo, none, concat, avgpool.
    #[arg(long, default_value = "mbc")]
    pub policy: String,
    /// Stream lengths T, strictly increasing.
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    pub frames_list: Vec<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: ModelShape,
    #[arg(long, default_value_t = crate::default_seed())]
    pub seed: u64,
}

/// One CSV row per stream length. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub policy: String,
    pub frames: usize,
    pub bank_size: usize,
    pub queries: usize,
    pub tokens: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub seed: u64,
    pub downstream_token_rows: usize,
    /// Largest visual cross-attention KV row count over the run.
    pub peak_kv_rows: usize,
    /// Largest query self-attention KV row count over the run and blocks.
    pub peak_query_kv_rows: usize,
    pub peak_resident_floats: usize,
    pub peak_resident_bytes: usize,
    pub wall_clock_ms: f64,
}

/// Unit-basis frames with unit-variance noise: every step sees fresh,
/// tie-free content.
pub fn random_stream_spec(seed: u64, frames: usize, shape: &ModelShape) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        frames,
        tokens: shape.tokens,
        channels: shape.channels,
        segments: vec![Segment {
            length: frames,
            basis: 0,
            noise: 1.0,
        }],
        label: 0,
    }
}

pub(crate) fn model_for(shape: &ModelShape, policy: &str, seed: u64) -> Result<(ModelConfig, ModelParams)> {
    let config = shape.model_config(policy)?;
    let params = ModelParams::init(&mut ChaCha8Rng::seed_from_u64(seed), &config)?;
    Ok((config, params))
}

pub(crate) fn run_once(config: &ModelConfig, params: &ModelParams, spec: &SyntheticSpec) -> Result<StreamRun> {
    Ok(run_stream(generate_synthetic(spec)?, params, config)?)
}

pub fn run(args: &ScalingArgs) -> Result<Vec<ScalingRow>> {
    strictly_increasing("frames-list", &args.frames_list)?;
    let (config, params) = model_for(&args.shape, &args.policy, args.seed)?;
    let s = &args.shape;
    args.frames_list
        .iter()
        .map(|&frames| {
            let r = run_once(&config, &params, &random_stream_spec(args.seed, frames, s))?;
            Ok(ScalingRow {
                policy: args.policy.clone(),
                frames,
                bank_size: s.bank_size,
                queries: s.queries,
                tokens: s.tokens,
                channels: s.channels,
                blocks: s.blocks,
                heads: s.heads,
                seed: args.seed,
                downstream_token_rows: r.downstream_token_rows(),
                peak_kv_rows: r.peak_visual_kv_rows(),
                peak_query_kv_rows: r.peak_query_kv_rows(),
                peak_resident_floats: r.peak_resident_floats,
                peak_resident_bytes: r.peak_resident_floats * std::mem::size_of::<f64>(),
                wall_clock_ms: r.wall_clock_ns as f64 / 1e6,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(policy: &str, frames: Vec<usize>) -> ScalingArgs {
        ScalingArgs {
            policy: policy.into(),
            frames_list: frames,
            shape: ModelShape {
                bank_size: 3,
                queries: 2,
                tokens: 2,
                channels: 4,
                blocks: 1,
                heads: 1,
            },
            seed: 0,
        }
    }

    #[test]
    fn rows_per_length() {
        let rows = run(&args("fifo", vec![2, 5])).unwrap();
        assert_eq!(rows.iter().map(|r| r.peak_kv_rows).collect::<Vec<_>>(), [4, 6]);
        assert!(rows.iter().all(|r| r.downstream_token_rows == 2));
    }

    #[test]
    fn unsorted_lengths_rejected() {
        assert!(run(&args("mbc", vec![5, 2])).is_err());
    }
}
