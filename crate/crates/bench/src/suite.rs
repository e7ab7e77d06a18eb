//! The oracle and property checks behind `verify` and the acceptance tests.
//!
//! Every check is seeded and reports the indices of failing instances, so a
//! rerun with the same seed reproduces the same failure set.

use malmm_core::autodiff::{Eval, Graph, Tape};
use malmm_core::memory_bank::oracle::{oracle_compress, Level};
use malmm_core::memory_bank::{CompressionPolicy, MemoryBank, TieBreak};
use malmm_core::pipeline::{
    classify, cross_entropy, example_gradients, forward_tokens, generate_synthetic, run_stream, Example, ModelConfig,
    ModelParams, PositionEncoding, Segment, SyntheticSpec,
};
use malmm_core::qformer::{attention, attention_weights, causality_probe, AttentionParams, NamedTensors, QFormerConfig, QFormerParams};
use malmm_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub instances: usize,
    /// Indices of failing instances.
    pub failures: Vec<usize>,
    /// Worst observed error, where the check is numeric.
    pub max_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckResult {
    fn new(name: &str, seed: u64) -> Self {
        CheckResult {
            name: name.into(),
            seed,
            instances: 0,
            failures: Vec::new(),
            max_error: 0.0,
            note: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.instances > 0
    }

    fn record(&mut self, ok: bool, error: f64) {
        if !ok {
            self.failures.push(self.instances);
        }
        self.max_error = self.max_error.max(error);
        self.instances += 1;
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// One compression instance: a stream of `P x C` grids and a capacity.
#[derive(Debug, Clone)]
pub struct Instance {
    pub grids: Vec<Tensor>,
    pub capacity: usize,
    /// Built so that several adjacent pairs share the top similarity.
    pub tie: bool,
}

/// Random instance within the oracle limits: `T <= 12, P <= 4, C <= 6, M <= 8`.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let t = rng.random_range(1..=12);
    let p = rng.random_range(1..=4);
    let c = rng.random_range(1..=6);
    Instance {
        grids: (0..t).map(|_| uniform(rng, p, c)).collect(),
        capacity: rng.random_range(1..=8),
        tie: false,
    }
}

/// Tie instance: repeated grids or an alternating `ABAB...` pattern, long
/// enough that compression runs with several equally similar pairs.
pub fn tie_instance(rng: &mut impl Rng) -> Instance {
    let capacity = rng.random_range(2..=8);
    let t = rng.random_range(capacity + 1..=12);
    let p = rng.random_range(1..=4);
    let c = rng.random_range(1..=6);
    let a = uniform(rng, p, c);
    let b = uniform(rng, p, c);
    let grids = match rng.random_range(0..3) {
        0 => vec![a; t],
        1 => (0..t).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect(),
        // runs of duplicates: AAABBB...
        _ => {
            let run = rng.random_range(2..=3);
            (0..t).map(|i| if (i / run) % 2 == 0 { a.clone() } else { b.clone() }).collect()
        }
    };
    Instance {
        grids,
        capacity,
        tie: true,
    }
}

/// `count` instances; every tenth one is a tie instance.
pub fn oracle_instances(seed: u64, count: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| if i % 10 == 0 { tie_instance(&mut rng) } else { random_instance(&mut rng) })
        .collect()
}

pub fn stream_into(grids: &[Tensor], capacity: usize, policy: CompressionPolicy) -> malmm_core::Result<MemoryBank> {
    let first = &grids[0];
    let mut bank = MemoryBank::new(capacity, first.rows(), first.cols(), policy)?;
    for g in grids {
        bank.append_tokens(g.clone())?;
    }
    Ok(bank)
}

/// Production compression against the brute-force oracle, at one level.
pub fn check_mbc_oracle(seed: u64, instances: &[Instance], level: Level, tie_break: TieBreak) -> CheckResult {
    let name = match level {
        Level::Token => "mbc_token_vs_oracle",
        Level::Frame => "mbc_frame_vs_oracle",
    };
    let policy = match level {
        Level::Token => CompressionPolicy::MBC_TOKEN,
        Level::Frame => CompressionPolicy::MBC_FRAME,
    }
    .with_tie_break(tie_break);
    let mut out = CheckResult::new(name, seed);
    let mut ties = 0;
    for inst in instances {
        ties += usize::from(inst.tie);
        let outcome = stream_into(&inst.grids, inst.capacity, policy)
            .ok()
            .zip(oracle_compress(&inst.grids, inst.capacity, level).ok())
            .and_then(|(bank, oracle)| oracle.compare(&bank));
        match outcome {
            Some(err) => out.record(err < 1e-12, err),
            None => out.record(false, 0.0),
        }
    }
    out.note = Some(format!("{ties} tie instances"));
    out
}

/// Independent order check: per position, spans are non-empty, ascending,
/// contiguous, and cover `1..=T`; weights equal span lengths.
pub fn order_preserved(bank: &MemoryBank, frames: u64) -> bool {
    for i in 0..bank.positions() {
        let mut next = 1u64;
        for e in bank.entries() {
            let s = e.provenance()[i];
            if s.first != next || s.last < s.first || e.grid().weights()[i] != s.last - s.first + 1 {
                return false;
            }
            next = s.last + 1;
        }
        if next != frames + 1 {
            return false;
        }
    }
    true
}

pub fn check_order_preservation(seed: u64, instances: &[Instance]) -> CheckResult {
    let mut out = CheckResult::new("order_preservation", seed);
    for inst in instances {
        let ok = [CompressionPolicy::MBC_TOKEN, CompressionPolicy::MBC_FRAME].iter().all(|&p| {
            stream_into(&inst.grids, inst.capacity, p)
                .map(|b| order_preserved(&b, inst.grids.len() as u64))
                .unwrap_or(false)
        });
        out.record(ok, 0.0);
    }
    out
}

fn banks_bit_identical(a: &MemoryBank, b: &MemoryBank) -> bool {
    a.len() == b.len()
        && a.entries().iter().zip(b.entries()).all(|(x, y)| {
            x.provenance() == y.provenance()
                && x.tokens().data().iter().zip(y.tokens().data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

/// The two-position stream where token-level and frame-level compression
/// pick different merges: position 0 prefers merging frames 1-2, position 1
/// prefers 2-3, and the whole-frame similarities tie (so frame level takes
/// the earlier pair).
pub fn frame_token_divergent_example() -> (Vec<Tensor>, usize) {
    let row = |x: &[f64]| x.to_vec();
    let grid = |a: Vec<f64>, b: Vec<f64>| Tensor::from_rows(&[&a, &b]).expect("2x2");
    (
        vec![
            grid(row(&[1.0, 0.0]), row(&[1.0, 0.0])),
            grid(row(&[1.0, 0.0]), row(&[0.0, 1.0])),
            grid(row(&[0.0, 1.0]), row(&[0.0, 1.0])),
        ],
        2,
    )
}

pub fn check_frame_token_consistency(seed: u64, count: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut out = CheckResult::new("frame_token_consistency", seed);
    for _ in 0..count {
        let mut inst = random_instance(&mut rng);
        let c = inst.grids[0].cols();
        inst.grids = inst.grids.iter().map(|_| uniform(&mut rng, 1, c)).collect();
        let token = stream_into(&inst.grids, inst.capacity, CompressionPolicy::MBC_TOKEN);
        let frame = stream_into(&inst.grids, inst.capacity, CompressionPolicy::MBC_FRAME);
        let ok = matches!((&token, &frame), (Ok(a), Ok(b)) if banks_bit_identical(a, b));
        out.record(ok, 0.0);
    }
    let (grids, m) = frame_token_divergent_example();
    let differs = match (
        stream_into(&grids, m, CompressionPolicy::MBC_TOKEN),
        stream_into(&grids, m, CompressionPolicy::MBC_FRAME),
    ) {
        (Ok(a), Ok(b)) => !banks_bit_identical(&a, &b),
        _ => false,
    };
    out.record(differs, 0.0);
    out.note = Some(format!("{count} P=1 instances bit-identical; last instance is the P=2 divergent example"));
    out
}

pub fn check_fifo_exactness(seed: u64, instances: &[Instance]) -> CheckResult {
    let mut out = CheckResult::new("fifo_exactness", seed);
    for inst in instances {
        let ok = stream_into(&inst.grids, inst.capacity, CompressionPolicy::FIFO)
            .map(|bank| {
                let t = inst.grids.len();
                let keep = t.min(inst.capacity);
                bank.len() == keep
                    && bank.entries().iter().enumerate().all(|(j, e)| {
                        let step = (t - keep + j + 1) as u64;
                        e.tokens() == &inst.grids[t - keep + j]
                            && e.provenance().iter().all(|s| s.first == step && s.last == step)
                    })
            })
            .unwrap_or(false);
        out.record(ok, 0.0);
    }
    out
}

fn random_qformer(rng: &mut impl Rng) -> QFormerConfig {
    let heads = rng.random_range(1..=2);
    let policy = match rng.random_range(0..3) {
        0 => CompressionPolicy::MBC_TOKEN,
        1 => CompressionPolicy::MBC_FRAME,
        _ => CompressionPolicy::FIFO,
    };
    QFormerConfig {
        num_blocks: rng.random_range(1..=2),
        num_queries: rng.random_range(1..=3),
        channels: 2 * heads * rng.random_range(1..=2),
        num_heads: heads,
        ffn_hidden: rng.random_range(2..=6),
        visual_tokens: rng.random_range(1..=3),
        bank_capacity: rng.random_range(1..=4),
        policy,
        ..QFormerConfig::default()
    }
}

/// Streams sharing a prefix produce bit-identical outputs over it.
pub fn check_causality(seed: u64, pairs: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut out = CheckResult::new("causality", seed);
    for _ in 0..pairs {
        let cfg = random_qformer(&mut rng);
        let params = QFormerParams::init(&mut rng, &cfg);
        let t = rng.random_range(2..=10);
        let prefix = rng.random_range(1..t);
        let a: Vec<Tensor> = (0..t).map(|_| uniform(&mut rng, cfg.visual_tokens, cfg.channels)).collect();
        let mut b = a.clone();
        for f in b.iter_mut().skip(prefix) {
            *f = uniform(&mut rng, cfg.visual_tokens, cfg.channels);
        }
        out.record(causality_probe(&params, &cfg, &a, &b, prefix).unwrap_or(false), 0.0);
    }
    out
}

/// Attention rows sum to one, and duplicating every key/value row leaves a
/// single-head output unchanged.
pub fn check_attention(seed: u64, cases: usize) -> (CheckResult, CheckResult) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0003);
    let mut sums = CheckResult::new("attention_row_sums", seed);
    let mut dup = CheckResult::new("attention_duplication_invariance", seed);
    for _ in 0..cases {
        let heads = rng.random_range(1..=2);
        let c = 2 * heads * rng.random_range(1..=3);
        let n = rng.random_range(1..=4);
        let r = rng.random_range(1..=6);
        let p = AttentionParams::init(&mut rng, c);
        let q = uniform(&mut rng, n, c).scale(2.0);
        let kv = uniform(&mut rng, r, c).scale(2.0);
        let worst = attention_weights(&q, &kv, &p, heads)
            .map(|ws| {
                ws.iter()
                    .flat_map(|w| (0..w.rows()).map(move |i| (w.row(i).iter().sum::<f64>() - 1.0).abs()))
                    .fold(0.0, f64::max)
            })
            .unwrap_or(f64::INFINITY);
        sums.record(worst <= 1e-12, worst);

        let doubled = Tensor::concat_rows(&[&kv, &kv]).expect("same width");
        let diff = attention(&q, &kv, &p, 1)
            .and_then(|a| attention(&q, &doubled, &p, 1).and_then(|b| a.max_abs_diff(&b)))
            .unwrap_or(f64::INFINITY);
        dup.record(diff < 1e-10, diff);
    }
    (sums, dup)
}

/// Configuration for the full forward-plus-loss gradient check.
pub fn gradient_check_config() -> ModelConfig {
    ModelConfig {
        qformer: QFormerConfig {
            num_blocks: 2,
            num_queries: 4,
            channels: 8,
            num_heads: 2,
            ffn_hidden: 16,
            visual_tokens: 2,
            bank_capacity: 3,
            policy: CompressionPolicy::MBC_TOKEN,
            ..QFormerConfig::default()
        },
        num_classes: 3,
        position: PositionEncoding::default(),
        aggregation: Default::default(),
    }
}

/// Reverse-mode gradients of every parameter against central differences
/// (`h = 1e-5`) on a `T = 4` stream. Relative error uses
/// `max(|a|, |n|, 1e-6)` as denominator.
pub fn check_gradients(seed: u64, config: &ModelConfig, frames: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0004);
    let mut out = CheckResult::new("gradient_check", seed);
    let Ok(params) = ModelParams::init(&mut rng, config) else {
        out.record(false, f64::INFINITY);
        return out;
    };
    let q = &config.qformer;
    let example = Example {
        frames: (0..frames).map(|_| uniform(&mut rng, q.visual_tokens, q.channels)).collect(),
        label: rng.random_range(0..config.num_classes),
    };
    let Ok((_, analytic)) = example_gradients(&params, config, &example) else {
        out.record(false, f64::INFINITY);
        return out;
    };
    let loss_at = |p: &ModelParams| -> f64 {
        forward_tokens(&mut Eval, config, p, &example.frames)
            .and_then(|tokens| classify(&mut Eval, &p.head, &tokens))
            .and_then(|logits| cross_entropy(&logits, example.label))
            .unwrap_or(f64::NAN)
    };
    let h = 1e-5;
    let leaves = params.leaves().len();
    for leaf in 0..leaves {
        let len = params.leaves()[leaf].len();
        for e in 0..len {
            let nudged = |delta: f64| {
                let mut p = params.clone();
                let mut k = 0;
                p.visit_mut("", &mut |_, t| {
                    if k == leaf {
                        t.data_mut()[e] += delta;
                    }
                    k += 1;
                });
                loss_at(&p)
            };
            let numeric = (nudged(h) - nudged(-h)) / (2.0 * h);
            let a = analytic[leaf].as_ref().map_or(0.0, |g| g.data()[e]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            out.record(rel < 1e-4, rel);
        }
    }
    out
}

/// `σ = 0` stream of orthogonal constant segments.
pub fn coverage_spec(seed: u64, lengths: &[usize], tokens: usize, channels: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        frames: lengths.iter().sum(),
        tokens,
        channels,
        segments: lengths
            .iter()
            .enumerate()
            .map(|(b, &length)| Segment {
                length,
                basis: b,
                noise: 0.0,
            })
            .collect(),
        label: 0,
    }
}

fn spans_of(bank: &MemoryBank) -> Vec<Vec<(u64, u64)>> {
    (0..bank.positions())
        .map(|i| bank.entries().iter().map(|e| (e.provenance()[i].first, e.provenance()[i].last)).collect())
        .collect()
}

/// With `M = K` segments, token-level compression ends with exactly one
/// entry per segment; FIFO keeps only the last `M` frames. Checked on the
/// raw bank and through the full pipeline's visual bank.
pub fn check_segment_coverage(seed: u64) -> CheckResult {
    let mut out = CheckResult::new("segment_coverage", seed);
    let lengths = [3, 2, 4, 1, 3];
    let (p, c) = (2, 6);
    let spec = coverage_spec(seed, &lengths, p, c);
    let segs = spec.segment_spans();
    let t = spec.frames as u64;
    let m = lengths.len();
    let Ok(frames) = generate_synthetic(&spec).and_then(|s| s.collect_frames()) else {
        out.record(false, 0.0);
        return out;
    };
    let fifo_window: Vec<(u64, u64)> = (t - m as u64 + 1..=t).map(|s| (s, s)).collect();
    let bank_ok = |policy, want: &Vec<(u64, u64)>| {
        stream_into(&frames, m, policy).map(|b| spans_of(&b).iter().all(|s| s == want)).unwrap_or(false)
    };
    out.record(bank_ok(CompressionPolicy::MBC_TOKEN, &segs), 0.0);
    out.record(bank_ok(CompressionPolicy::FIFO, &fifo_window), 0.0);

    let pipeline_ok = |policy, want: &Vec<(u64, u64)>| {
        let cfg = ModelConfig {
            qformer: QFormerConfig {
                num_blocks: 1,
                num_queries: 2,
                channels: c,
                num_heads: 1,
                ffn_hidden: 4,
                visual_tokens: p,
                bank_capacity: m,
                policy,
                ..QFormerConfig::default()
            },
            num_classes: 2,
            position: PositionEncoding::Sinusoidal { scale: 0.05 },
            aggregation: Default::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(&mut rng, &cfg)
            .and_then(|params| run_stream(generate_synthetic(&spec)?, &params, &cfg))
            .map(|run| run.state.is_some_and(|s| spans_of(s.visual_bank()).iter().all(|x| x == want)))
            .unwrap_or(false)
    };
    out.record(pipeline_ok(CompressionPolicy::MBC_TOKEN, &segs), 0.0);
    out.record(pipeline_ok(CompressionPolicy::FIFO, &fifo_window), 0.0);
    out.note = Some("raw bank MBC, raw bank FIFO, pipeline MBC, pipeline FIFO".into());
    out
}

/// Everything `verify` runs for one seed.
pub fn run_all(seed: u64, instances: usize, tie_break: TieBreak) -> Vec<CheckResult> {
    let insts = oracle_instances(seed, instances);
    let (sums, dup) = check_attention(seed, 100);
    let grad_cfg = gradient_check_config();
    vec![
        check_mbc_oracle(seed, &insts, Level::Token, tie_break),
        check_mbc_oracle(seed, &insts, Level::Frame, tie_break),
        check_order_preservation(seed, &insts),
        check_frame_token_consistency(seed, 200),
        check_fifo_exactness(seed, &insts),
        check_causality(seed, 100),
        sums,
        dup,
        check_gradients(seed, &grad_cfg, 4),
        check_segment_coverage(seed),
    ]
}

/// The tape and eager graphs agree on a loss, as a cheap sanity check used
/// by tests of this module.
pub fn tape_matches_eval(seed: u64) -> bool {
    let cfg = gradient_check_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Ok(params) = ModelParams::init(&mut rng, &cfg) else { return false };
    let frames: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, 2, 8)).collect();
    let mut tape = Tape::new();
    let vars = params.map(&mut |t| tape.param(t));
    let taped = forward_tokens(&mut tape, &cfg, &vars, &frames).map(|v| tape.value(&v).clone());
    let eager = forward_tokens(&mut Eval, &cfg, &params, &frames);
    matches!((taped, eager), (Ok(a), Ok(b)) if a == b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_instances_really_compress() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let inst = tie_instance(&mut rng);
            assert!(inst.grids.len() > inst.capacity && inst.capacity >= 2);
        }
    }

    #[test]
    fn divergent_example_differs() {
        let r = check_frame_token_consistency(0, 5);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn small_suite_passes() {
        let insts = oracle_instances(3, 60);
        assert!(check_mbc_oracle(3, &insts, Level::Token, TieBreak::Earliest).passed());
        assert!(check_order_preservation(3, &insts).passed());
        assert!(check_fifo_exactness(3, &insts).passed());
        assert!(check_segment_coverage(3).passed());
        assert!(tape_matches_eval(3));
    }

    #[test]
    fn mutation_fails_only_on_ties() {
        let insts = oracle_instances(5, 100);
        let r = check_mbc_oracle(5, &insts, Level::Token, TieBreak::Latest);
        assert!(!r.failures.is_empty());
        // with C = 1 every cosine is +-1, so random one-channel streams tie too
        assert!(
            r.failures.iter().all(|&i| insts[i].tie || insts[i].grids[0].cols() == 1),
            "{:?}",
            r.failures
        );
    }
}
