use crate::autodiff::{Eval, Graph, RowTerm};
use crate::error::{Error, Result};
use crate::memory_bank::{Compaction, CompressionPolicy, MemoryBank};
use crate::tensor::Tensor;

use super::attention::attend;
use super::{BlockParams, QFormerConfig, QFormerParams, SublayerOrder};

/// Per-stream runtime state: one shared visual bank, one query bank per
/// block, and the number of frames consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct QFormerState {
    visual_bank: MemoryBank,
    query_banks: Vec<MemoryBank>,
    timestep: u64,
}

impl QFormerState {
    pub fn new(config: &QFormerConfig) -> Result<Self> {
        QFormerState::with_capacity(config, config.bank_capacity)
    }

    /// Like [`QFormerState::new`] but with an explicit bank capacity, used to
    /// size uncompressed (`none`) banks to the stream length.
    pub fn with_capacity(config: &QFormerConfig, capacity: usize) -> Result<Self> {
        config.validate()?;
        let bank = |enabled: bool, positions: usize| {
            if enabled {
                MemoryBank::new(capacity, positions, config.channels, config.policy)
            } else {
                MemoryBank::new(1, positions, config.channels, CompressionPolicy::FIFO)
            }
        };
        Ok(QFormerState {
            visual_bank: bank(config.use_visual_bank, config.visual_tokens)?,
            query_banks: (0..config.num_blocks)
                .map(|_| bank(config.use_query_bank, config.num_queries))
                .collect::<Result<_>>()?,
            timestep: 0,
        })
    }

    pub fn visual_bank(&self) -> &MemoryBank {
        &self.visual_bank
    }

    pub fn query_banks(&self) -> &[MemoryBank] {
        &self.query_banks
    }

    pub fn timestep(&self) -> u64 {
        self.timestep
    }

    /// Floats held across steps by all banks.
    pub fn resident_floats(&self) -> usize {
        self.visual_bank.resident_floats() + self.query_banks.iter().map(MemoryBank::resident_floats).sum::<usize>()
    }

    /// Runs block `l` on `z` against the banks as they currently stand.
    pub fn block_forward(&self, l: usize, z: &Tensor, params: &QFormerParams, config: &QFormerConfig) -> Result<Tensor> {
        let bank = self
            .query_banks
            .get(l)
            .ok_or_else(|| Error::Config(format!("block {l} out of range")))?;
        let query_kv = bank.flatten()?;
        let visual_kv = self.visual_bank.flatten()?;
        block_forward(&mut Eval, config, &params.blocks[l], z, &query_kv, &visual_kv)
    }
}

/// Tape-side copies of the bank contents. Kept in lockstep with the numeric
/// banks by replaying each [`Compaction`], so gradients flow through merged
/// history.
#[derive(Debug, Clone)]
pub struct BankMirrors<V> {
    visual: Vec<V>,
    queries: Vec<Vec<V>>,
}

impl<V> BankMirrors<V> {
    pub fn new(num_blocks: usize) -> Self {
        BankMirrors {
            visual: Vec::new(),
            queries: (0..num_blocks).map(|_| Vec::new()).collect(),
        }
    }
}

fn replay<G: Graph>(g: &mut G, mirror: &mut Vec<G::Var>, step: &Compaction) -> Result<()> {
    match step {
        Compaction::Evicted => {
            mirror.remove(0);
        }
        Compaction::Merged { at } => {
            let old = std::mem::take(mirror);
            for j in 0..old.len() - 1 {
                if at.iter().all(|&k| j < k) {
                    mirror.push(old[j].clone());
                } else if at.iter().all(|&k| j > k) {
                    mirror.push(old[j + 1].clone());
                } else {
                    let rows: Vec<Vec<RowTerm>> = at
                        .iter()
                        .enumerate()
                        .map(|(i, &k)| match j.cmp(&k) {
                            std::cmp::Ordering::Less => vec![RowTerm::new(0, i, 1.0)],
                            std::cmp::Ordering::Equal => vec![RowTerm::new(0, i, 0.5), RowTerm::new(1, i, 0.5)],
                            std::cmp::Ordering::Greater => vec![RowTerm::new(1, i, 1.0)],
                        })
                        .collect();
                    let merged = g.mix_rows(&[old[j].clone(), old[j + 1].clone()], &rows)?;
                    mirror.push(merged);
                }
            }
        }
    }
    Ok(())
}

/// Appends `grid` to `bank` and returns the bank's contents as one
/// key/value matrix.
fn ingest<G: Graph>(g: &mut G, bank: &mut MemoryBank, mirror: &mut Vec<G::Var>, grid: &G::Var) -> Result<G::Var> {
    let step = bank.append_tokens(g.value(grid).clone())?;
    if g.recording() {
        mirror.push(grid.clone());
        if let Some(step) = &step {
            replay(g, mirror, step)?;
        }
        debug_assert_eq!(mirror.len(), bank.len());
        if mirror.len() == 1 {
            Ok(mirror[0].clone())
        } else {
            g.concat_rows(mirror)
        }
    } else {
        Ok(g.constant(bank.flatten()?))
    }
}

/// One Q-Former block. `query_kv` is the flattened query bank (including the
/// current `z`), `visual_kv` the flattened visual bank.
pub fn block_forward<G: Graph>(
    g: &mut G,
    config: &QFormerConfig,
    p: &BlockParams<G::Var>,
    z: &G::Var,
    query_kv: &G::Var,
    visual_kv: &G::Var,
) -> Result<G::Var> {
    let eps = config.ln_eps;
    let heads = config.num_heads;
    let self_sub = |g: &mut G, z: &G::Var| -> Result<G::Var> {
        let h = g.layer_norm(z, &p.ln_self.gamma, &p.ln_self.beta, eps)?;
        let kv = g.layer_norm(query_kv, &p.ln_self.gamma, &p.ln_self.beta, eps)?;
        let (out, _) = attend(g, &h, &kv, &p.self_attn, heads)?;
        g.add(z, &out)
    };
    let cross_sub = |g: &mut G, z: &G::Var| -> Result<G::Var> {
        let h = g.layer_norm(z, &p.ln_cross.gamma, &p.ln_cross.beta, eps)?;
        let (out, _) = attend(g, &h, visual_kv, &p.cross_attn, heads)?;
        g.add(z, &out)
    };
    let z = match config.sublayer_order {
        SublayerOrder::SelfFirst => {
            let z = self_sub(g, z)?;
            cross_sub(g, &z)?
        }
        SublayerOrder::CrossFirst => {
            let z = cross_sub(g, z)?;
            self_sub(g, &z)?
        }
    };
    let h = g.layer_norm(&z, &p.ln_ffn.gamma, &p.ln_ffn.beta, eps)?;
    let h = g.matmul(&h, &p.ffn_in)?;
    let h = g.gelu(&h)?;
    let h = g.matmul(&h, &p.ffn_out)?;
    g.add(&z, &h)
}

/// Consumes one position-embedded frame (`P x C`) and returns the final
/// block's queries (`N x C`). Generic over the graph so the same code runs
/// eagerly or on a tape; `mirrors` is only touched when recording.
pub fn step_on<G: Graph>(
    g: &mut G,
    state: &mut QFormerState,
    mirrors: &mut BankMirrors<G::Var>,
    params: &QFormerParams<G::Var>,
    config: &QFormerConfig,
    frame: &G::Var,
) -> Result<G::Var> {
    let shape = g.value(frame).shape();
    if shape != [config.visual_tokens, config.channels] {
        return Err(Error::GridDimension {
            got_tokens: shape[0],
            got_channels: *shape.last().unwrap_or(&0),
            want_tokens: config.visual_tokens,
            want_channels: config.channels,
        });
    }
    let visual_kv = ingest(g, &mut state.visual_bank, &mut mirrors.visual, frame)?;
    let mut z = params.queries.clone();
    for (l, block) in params.blocks.iter().enumerate() {
        let query_kv = ingest(g, &mut state.query_banks[l], &mut mirrors.queries[l], &z)?;
        z = block_forward(g, config, block, &z, &query_kv, &visual_kv)?;
    }
    state.timestep += 1;
    Ok(z)
}

/// Eager single step.
pub fn step(state: &mut QFormerState, params: &QFormerParams, config: &QFormerConfig, frame: &Tensor) -> Result<Tensor> {
    let mut mirrors = BankMirrors::new(config.num_blocks);
    step_on(&mut Eval, state, &mut mirrors, params, config, frame)
}

/// Runs both streams from fresh state and reports whether their outputs are
/// bit-identical at every timestep `<= prefix`.
pub fn causality_probe(
    params: &QFormerParams,
    config: &QFormerConfig,
    stream_a: &[Tensor],
    stream_b: &[Tensor],
    prefix: usize,
) -> Result<bool> {
    let mut a = QFormerState::new(config)?;
    let mut b = QFormerState::new(config)?;
    for (fa, fb) in stream_a.iter().zip(stream_b).take(prefix) {
        let za = step(&mut a, params, config, fa)?;
        let zb = step(&mut b, params, config, fb)?;
        if za.data().iter().zip(zb.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Ok(false);
        }
    }
    // the remainder still runs, so divergence after the prefix is exercised
    for (fa, fb) in stream_a.iter().zip(stream_b).skip(prefix) {
        step(&mut a, params, config, fa)?;
        step(&mut b, params, config, fb)?;
    }
    Ok(true)
}
