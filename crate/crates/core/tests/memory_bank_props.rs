use malmm_core::memory_bank::oracle::{oracle_compress, Level};
use malmm_core::memory_bank::{BankDump, CompressionPolicy, MemoryBank};
use malmm_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grids(seed: u64, t: usize, p: usize, c: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t)
        .map(|_| Tensor::matrix(p, c, (0..p * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

fn fill(gs: &[Tensor], m: usize, policy: CompressionPolicy) -> MemoryBank {
    let mut bank = MemoryBank::new(m, gs[0].rows(), gs[0].cols(), policy).unwrap();
    for g in gs {
        bank.append_tokens(g.clone()).unwrap();
    }
    bank
}

fn policy() -> impl Strategy<Value = CompressionPolicy> {
    prop_oneof![
        Just(CompressionPolicy::MBC_TOKEN),
        Just(CompressionPolicy::MBC_FRAME),
        Just(CompressionPolicy::FIFO),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn length_never_exceeds_capacity(seed: u64, t in 1usize..40, p in 1usize..5, c in 1usize..7, m in 1usize..10, pol in policy()) {
        let gs = grids(seed, t, p, c);
        let mut bank = MemoryBank::new(m, p, c, pol).unwrap();
        for (i, g) in gs.iter().enumerate() {
            bank.append_tokens(g.clone()).unwrap();
            prop_assert_eq!(bank.len(), (i + 1).min(m));
            prop_assert_eq!(bank.kv_rows(), bank.len() * p);
        }
        prop_assert!(bank.check_invariants().is_ok());
    }

    #[test]
    fn mbc_spans_partition_the_stream(seed: u64, t in 1usize..40, p in 1usize..5, c in 1usize..7, m in 1usize..10) {
        for pol in [CompressionPolicy::MBC_TOKEN, CompressionPolicy::MBC_FRAME] {
            let bank = fill(&grids(seed, t, p, c), m, pol);
            for i in 0..p {
                let spans: Vec<_> = bank.entries().iter().map(|e| e.provenance()[i]).collect();
                prop_assert_eq!(spans[0].first, 1);
                prop_assert_eq!(spans.last().unwrap().last, t as u64);
                for w in spans.windows(2) {
                    prop_assert_eq!(w[0].last + 1, w[1].first);
                }
                let total: u64 = spans.iter().map(|s| s.count()).sum();
                prop_assert_eq!(total, t as u64);
            }
        }
    }

    #[test]
    fn oversized_bank_keeps_the_stream_verbatim(seed: u64, t in 1usize..12, p in 1usize..4, c in 1usize..5, pol in policy()) {
        let gs = grids(seed, t, p, c);
        let bank = fill(&gs, t, pol);
        for (e, g) in bank.entries().iter().zip(&gs) {
            prop_assert_eq!(e.tokens(), g);
        }
    }

    #[test]
    fn agrees_with_exhaustive_oracle(seed: u64, t in 1usize..=12, p in 1usize..=4, c in 1usize..=6, m in 1usize..=8) {
        let gs = grids(seed, t, p, c);
        for (level, pol) in [(Level::Token, CompressionPolicy::MBC_TOKEN), (Level::Frame, CompressionPolicy::MBC_FRAME)] {
            let oracle = oracle_compress(&gs, m, level).unwrap();
            let err = oracle.compare(&fill(&gs, m, pol));
            prop_assert_eq!(err, Some(0.0));
        }
    }

    #[test]
    fn merged_rows_stay_in_the_convex_hull(seed: u64, t in 2usize..30, c in 1usize..5, m in 1usize..6) {
        // every merge is an average, so each coordinate stays within the
        // range of the frames its span covers
        let gs = grids(seed, t, 1, c);
        let bank = fill(&gs, m, CompressionPolicy::MBC_TOKEN);
        for e in bank.entries() {
            let s = e.provenance()[0];
            for ch in 0..c {
                let vals = s.timesteps().map(|k| gs[k as usize - 1].get(0, ch));
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                let x = e.tokens().get(0, ch);
                prop_assert!(lo - 1e-15 <= x && x <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn dump_round_trips(seed: u64, t in 1usize..20, p in 1usize..4, c in 1usize..5, m in 1usize..6, pol in policy()) {
        let bank = fill(&grids(seed, t, p, c), m, pol);
        let json = BankDump::from_bank(&bank).to_json().unwrap();
        let back: BankDump = serde_json::from_str(&json).unwrap();
        let rebuilt = back.into_bank().unwrap();
        prop_assert_eq!(BankDump::from_bank(&rebuilt), BankDump::from_bank(&bank));
    }
}

#[test]
fn constant_stream_merges_earliest_pair_first() {
    let g = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
    let bank = fill(&vec![g; 4], 3, CompressionPolicy::MBC_TOKEN);
    let spans: Vec<_> = bank.entries().iter().map(|e| e.provenance()[0].count()).collect();
    // each overflow merges pair 0, so the first entry absorbs everything
    assert_eq!(spans, [2, 1, 1]);
}

#[test]
fn capacity_one_is_a_running_merge() {
    let gs = grids(3, 5, 2, 3);
    let bank = fill(&gs, 1, CompressionPolicy::MBC_TOKEN);
    let mut want = gs[0].clone();
    for g in &gs[1..] {
        want = want.add(g).unwrap().scale(0.5);
    }
    assert_eq!(bank.entries()[0].tokens(), &want);
}
