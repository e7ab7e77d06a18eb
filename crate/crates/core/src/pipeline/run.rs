use std::time::Instant;

use serde::Serialize;

use super::model::{embed_frame, isolated_frame, running_mean, Aggregation, ModelConfig, ModelParams};
use super::FeatureStream;
use crate::autodiff::Eval;
use crate::error::{Error, Result};
use crate::qformer::{step_on, BankMirrors, QFormerState};
use crate::tensor::{resident, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub timestep: u64,
    pub visual_bank_len: usize,
    pub query_bank_lens: Vec<usize>,
    pub visual_kv_rows: usize,
    /// Largest self-attention KV row count over the blocks.
    pub query_kv_rows: usize,
    pub wall_clock_ns: u64,
}

#[derive(Debug)]
pub struct StreamRun {
    pub tokens: Tensor,
    pub trace: Vec<StepTrace>,
    /// Peak of tensor floats alive during the run, above what was alive when
    /// it started.
    pub peak_resident_floats: usize,
    pub wall_clock_ns: u64,
    /// Final banks of a memory run; `None` for the baselines.
    pub state: Option<QFormerState>,
}

impl StreamRun {
    pub fn downstream_token_rows(&self) -> usize {
        self.tokens.rows()
    }

    pub fn peak_visual_kv_rows(&self) -> usize {
        self.trace.iter().map(|s| s.visual_kv_rows).max().unwrap_or(0)
    }

    pub fn peak_query_kv_rows(&self) -> usize {
        self.trace.iter().map(|s| s.query_kv_rows).max().unwrap_or(0)
    }
}

fn trace_of(state: &QFormerState, timestep: u64, started: Instant) -> StepTrace {
    StepTrace {
        timestep,
        visual_bank_len: state.visual_bank().len(),
        query_bank_lens: state.query_banks().iter().map(|b| b.len()).collect(),
        visual_kv_rows: state.visual_bank().kv_rows(),
        query_kv_rows: state.query_banks().iter().map(|b| b.kv_rows()).max().unwrap_or(0),
        wall_clock_ns: started.elapsed().as_nanos() as u64,
    }
}

type Outcome = (Tensor, Vec<StepTrace>, Option<QFormerState>);

fn measured(f: impl FnOnce() -> Result<Outcome>) -> Result<StreamRun> {
    let base = resident::live();
    resident::reset_peak();
    let started = Instant::now();
    let (tokens, trace, state) = f()?;
    let wall_clock_ns = started.elapsed().as_nanos() as u64;
    Ok(StreamRun {
        tokens,
        trace,
        peak_resident_floats: resident::peak().saturating_sub(base),
        wall_clock_ns,
        state,
    })
}

/// Streams frames through the model under `config.aggregation`; the memory
/// path returns only the final step's queries.
pub fn run_stream(stream: FeatureStream, params: &ModelParams, config: &ModelConfig) -> Result<StreamRun> {
    match config.aggregation {
        Aggregation::Memory => run_memory(stream, params, config),
        Aggregation::Concat => baseline_concat(stream, params, config),
        Aggregation::AvgPool => baseline_avgpool(stream, params, config),
    }
}

fn check_stream(stream: &FeatureStream, config: &ModelConfig) -> Result<()> {
    let q = &config.qformer;
    if stream.tokens() != q.visual_tokens || stream.channels() != q.channels {
        return Err(Error::GridDimension {
            got_tokens: stream.tokens(),
            got_channels: stream.channels(),
            want_tokens: q.visual_tokens,
            want_channels: q.channels,
        });
    }
    Ok(())
}

fn run_memory(stream: FeatureStream, params: &ModelParams, config: &ModelConfig) -> Result<StreamRun> {
    check_stream(&stream, config)?;
    measured(|| {
        let mut state = QFormerState::with_capacity(&config.qformer, config.capacity_for(stream.frames()))?;
        let mut mirrors = BankMirrors::new(config.qformer.num_blocks);
        let mut trace = Vec::with_capacity(stream.frames());
        let mut z = None;
        for (i, frame) in stream.enumerate() {
            let started = Instant::now();
            let t = i as u64 + 1;
            let f = embed_frame(&mut Eval, config, params, frame?, t)?;
            z = Some(step_on(&mut Eval, &mut state, &mut mirrors, &params.qformer, &config.qformer, &f)?);
            trace.push(trace_of(&state, t, started));
        }
        Ok((z.ok_or_else(|| Error::Config("empty stream".into()))?, trace, Some(state)))
    })
}

fn isolated_trace(config: &ModelConfig, t: u64, started: Instant) -> StepTrace {
    let q = &config.qformer;
    StepTrace {
        timestep: t,
        visual_bank_len: 1,
        query_bank_lens: vec![1; q.num_blocks],
        visual_kv_rows: q.visual_tokens,
        query_kv_rows: q.num_queries,
        wall_clock_ns: started.elapsed().as_nanos() as u64,
    }
}

/// Every frame runs alone through a fresh state; outputs are stacked in time
/// order, giving `N*T` rows.
pub fn baseline_concat(stream: FeatureStream, params: &ModelParams, config: &ModelConfig) -> Result<StreamRun> {
    check_stream(&stream, config)?;
    measured(|| {
        let mut outs = Vec::with_capacity(stream.frames());
        let mut trace = Vec::with_capacity(stream.frames());
        for (i, frame) in stream.enumerate() {
            let started = Instant::now();
            outs.push(isolated_frame(&mut Eval, config, params, frame?)?);
            trace.push(isolated_trace(config, i as u64 + 1, started));
        }
        let tokens = Tensor::concat_rows(&outs.iter().collect::<Vec<_>>())?;
        Ok((tokens, trace, None))
    })
}

/// Every frame runs alone through a fresh state; outputs are averaged.
pub fn baseline_avgpool(stream: FeatureStream, params: &ModelParams, config: &ModelConfig) -> Result<StreamRun> {
    check_stream(&stream, config)?;
    measured(|| {
        let mut mean: Option<Tensor> = None;
        let mut trace = Vec::with_capacity(stream.frames());
        for (i, frame) in stream.enumerate() {
            let started = Instant::now();
            let z = isolated_frame(&mut Eval, config, params, frame?)?;
            mean = Some(match mean {
                None => z,
                Some(m) => running_mean(&mut Eval, &m, &z, i + 1)?,
            });
            trace.push(isolated_trace(config, i as u64 + 1, started));
        }
        Ok((mean.ok_or_else(|| Error::Config("empty stream".into()))?, trace, None))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory_bank::CompressionPolicy;
    use crate::pipeline::{forward_tokens, PositionEncoding};
    use crate::qformer::{gaussian, QFormerConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(m: usize) -> ModelConfig {
        ModelConfig {
            qformer: QFormerConfig {
                num_blocks: 2,
                num_queries: 3,
                channels: 4,
                num_heads: 2,
                ffn_hidden: 8,
                visual_tokens: 2,
                bank_capacity: m,
                ..QFormerConfig::default()
            },
            num_classes: 2,
            position: PositionEncoding::default(),
            aggregation: Aggregation::Memory,
        }
    }

    fn frames(seed: u64, t: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| gaussian(&mut rng, &[2, 4], 1.0)).collect()
    }

    fn params(cfg: &ModelConfig) -> ModelParams {
        ModelParams::init(&mut ChaCha8Rng::seed_from_u64(17), cfg).unwrap()
    }

    fn stream(fs: Vec<Tensor>) -> FeatureStream {
        FeatureStream::from_frames(fs).unwrap()
    }

    #[test]
    fn single_frame_equals_forward_pass() {
        let cfg = config(4);
        let p = params(&cfg);
        let fs = frames(1, 1);
        let run = run_stream(stream(fs.clone()), &p, &cfg).unwrap();
        let direct = isolated_frame(&mut Eval, &cfg, &p, fs[0].clone()).unwrap();
        assert_eq!(run.tokens, direct);
    }

    #[test]
    fn trace_bank_lengths_saturate_at_capacity() {
        let cfg = config(4);
        let p = params(&cfg);
        let run = run_stream(stream(frames(2, 9)), &p, &cfg).unwrap();
        let lens: Vec<usize> = run.trace.iter().map(|s| s.visual_bank_len).collect();
        assert_eq!(lens, vec![1, 2, 3, 4, 4, 4, 4, 4, 4]);
        assert!(run.trace.iter().all(|s| s.query_bank_lens.iter().all(|&l| l == s.visual_bank_len)));
        assert_eq!(run.peak_visual_kv_rows(), 4 * 2);
        assert_eq!(run.peak_query_kv_rows(), 4 * 3);
    }

    #[test]
    fn downstream_rows_constant_in_t() {
        let cfg = config(5);
        let p = params(&cfg);
        for t in [5, 50, 500] {
            assert_eq!(run_stream(stream(frames(3, t)), &p, &cfg).unwrap().downstream_token_rows(), 3);
        }
    }

    #[test]
    fn streaming_matches_materialized_forward() {
        let cfg = config(3);
        let p = params(&cfg);
        let fs = frames(4, 8);
        let run = run_stream(stream(fs.clone()), &p, &cfg).unwrap();
        assert_eq!(run.tokens, forward_tokens(&mut Eval, &cfg, &p, &fs).unwrap());
    }

    #[test]
    fn concat_rows_grow_with_t() {
        let cfg = ModelConfig {
            aggregation: Aggregation::Concat,
            ..config(3)
        };
        let p = params(&cfg);
        let run = run_stream(stream(frames(5, 60)), &p, &cfg).unwrap();
        assert_eq!(run.downstream_token_rows(), 3 * 60);
        assert_eq!(run.peak_visual_kv_rows(), 2);
    }

    #[test]
    fn single_frame_baselines_equal_policy_none() {
        let cfg = config(3);
        let p = params(&cfg);
        let none = ModelConfig {
            qformer: QFormerConfig {
                policy: CompressionPolicy::NONE,
                ..cfg.qformer.clone()
            },
            ..cfg.clone()
        };
        let fs = frames(6, 1);
        let want = run_stream(stream(fs.clone()), &p, &none).unwrap().tokens;
        assert_eq!(baseline_concat(stream(fs.clone()), &p, &cfg).unwrap().tokens, want);
        assert_eq!(baseline_avgpool(stream(fs), &p, &cfg).unwrap().tokens, want);
    }

    #[test]
    fn policy_none_holds_whole_stream() {
        let cfg = ModelConfig {
            qformer: QFormerConfig {
                policy: CompressionPolicy::NONE,
                ..config(2).qformer
            },
            ..config(2)
        };
        let p = params(&cfg);
        let run = run_stream(stream(frames(7, 6)), &p, &cfg).unwrap();
        assert_eq!(run.trace.last().unwrap().visual_bank_len, 6);
    }

    #[test]
    fn wrong_grid_dims_rejected() {
        let cfg = config(3);
        let p = params(&cfg);
        let bad = vec![Tensor::zeros(&[3, 4])];
        assert!(matches!(
            run_stream(stream(bad), &p, &cfg),
            Err(Error::GridDimension { got_tokens: 3, .. })
        ));
    }
}
