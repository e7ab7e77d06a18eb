//! Acceptance gate: one test per criterion, each printing a single
//! `PASS`/`FAIL criterion N` line. Run with `--nocapture` to see them.
//!
//! Tests hold a shared lock so the timing criterion is not measured while
//! other criteria compete for the CPU.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use malmm_bench::commands::ablate::{self, AblateArgs};
use malmm_bench::commands::banklen::{self, BanklenArgs};
use malmm_bench::commands::scaling::{self, ScalingArgs, ScalingRow};
use malmm_bench::commands::timing::{self, TimingArgs};
use malmm_bench::options::ModelShape;
use malmm_bench::suite;
use malmm_core::memory_bank::oracle::Level;
use malmm_core::memory_bank::TieBreak;

static SERIAL: Mutex<()> = Mutex::new(());

const SEED: u64 = 0;

/// Prints the verdict line, then fails the test if the criterion failed.
fn verdict(n: u32, started: Instant, limit: Duration, ok: bool, detail: String) {
    let elapsed = started.elapsed();
    let in_time = elapsed <= limit;
    let pass = ok && in_time;
    println!(
        "{} criterion {n}: {detail} [{:.1}s of {}s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(ok, "criterion {n}: {detail}");
    assert!(in_time, "criterion {n} took {elapsed:?}, limit {limit:?}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn scaling_rows(policy: &str, frames: &[usize], shape: ModelShape) -> Vec<ScalingRow> {
    scaling::run(&ScalingArgs {
        policy: policy.into(),
        frames_list: frames.to_vec(),
        shape,
        seed: SEED,
    })
    .unwrap()
}

#[test]
fn criterion_01_constant_token_count() {
    let _g = lock();
    let started = Instant::now();
    let shape = ModelShape {
        queries: 8,
        ..ModelShape::default()
    };
    let ts = [10, 100, 1000];
    let mut ok = true;
    let mut seen = Vec::new();
    for policy in ["mbc", "fifo", "concat"] {
        let rows = scaling_rows(policy, &ts, shape.clone());
        let got: Vec<usize> = rows.iter().map(|r| r.downstream_token_rows).collect();
        let want: Vec<usize> = ts.iter().map(|&t| if policy == "concat" { 8 * t } else { 8 }).collect();
        ok &= got == want;
        seen.push(format!("{policy}={got:?}"));
    }
    verdict(1, started, Duration::from_secs(60), ok, seen.join(" "));
}

#[test]
fn criterion_02_bounded_memory() {
    let _g = lock();
    let started = Instant::now();
    let shape = ModelShape {
        bank_size: 20,
        ..ModelShape::default()
    };
    let (m, p) = (shape.bank_size, shape.tokens);
    let mbc = scaling_rows("mbc", &[5, 20, 100, 500, 1000], shape.clone());
    let kv_exact = mbc.iter().all(|r| r.peak_kv_rows == r.frames.min(m) * p);
    let flat: Vec<usize> = mbc.iter().filter(|r| r.frames >= 100).map(|r| r.peak_resident_floats).collect();
    let (lo, hi) = (*flat.iter().min().unwrap(), *flat.iter().max().unwrap());
    let flat_ok = hi as f64 <= lo as f64 * 1.05;
    let concat = scaling_rows("concat", &[100, 500, 1000], shape);
    let grows: Vec<usize> = concat.iter().map(|r| r.peak_resident_floats).collect();
    let grows_ok = grows.windows(2).all(|w| w[1] > w[0]);
    verdict(
        2,
        started,
        Duration::from_secs(120),
        kv_exact && flat_ok && grows_ok,
        format!(
            "kv rows {:?}, mbc resident {flat:?}, concat resident {grows:?}",
            mbc.iter().map(|r| r.peak_kv_rows).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_03_linear_time() {
    let _g = lock();
    let started = Instant::now();
    let (rows, summary) = timing::run(&TimingArgs {
        policy: "mbc".into(),
        frames_list: vec![50, 100, 200, 400],
        repeats: 5,
        shape: ModelShape::default(),
        seed: SEED,
    })
    .unwrap();
    let ok = summary.fit.r_squared >= 0.98 && rows.iter().all(|r| r.repeats >= 5);
    verdict(
        3,
        started,
        Duration::from_secs(300),
        ok,
        format!(
            "R^2 = {:.5}, medians ms {:?}, doubling ratios {:?}",
            summary.fit.r_squared,
            rows.iter().map(|r| (r.median_ms * 10.0).round() / 10.0).collect::<Vec<_>>(),
            summary.ratios.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_04_mbc_matches_oracle() {
    let _g = lock();
    let started = Instant::now();
    let insts = suite::oracle_instances(SEED, 1000);
    let ties = insts.iter().filter(|i| i.tie).count();
    let bounds = insts.iter().all(|i| {
        i.grids.len() <= 12 && i.grids[0].rows() <= 4 && i.grids[0].cols() <= 6 && (1..=8).contains(&i.capacity)
    });
    let token = suite::check_mbc_oracle(SEED, &insts, Level::Token, TieBreak::Earliest);
    let frame = suite::check_mbc_oracle(SEED, &insts, Level::Frame, TieBreak::Earliest);
    let ok = bounds && ties >= 50 && token.passed() && frame.passed() && token.max_error < 1e-12 && frame.max_error < 1e-12;
    verdict(
        4,
        started,
        Duration::from_secs(60),
        ok,
        format!(
            "{} instances ({ties} ties): token failures {:?} max err {:e}, frame failures {:?} max err {:e}",
            insts.len(),
            token.failures,
            token.max_error,
            frame.failures,
            frame.max_error
        ),
    );
}

#[test]
fn criterion_05_frame_token_consistency() {
    let _g = lock();
    let started = Instant::now();
    let r = suite::check_frame_token_consistency(SEED, 200);
    verdict(
        5,
        started,
        Duration::from_secs(30),
        r.passed() && r.instances == 201,
        format!("200 P=1 instances plus the P=2 example, failures {:?}", r.failures),
    );
}

#[test]
fn criterion_06_order_preservation() {
    let _g = lock();
    let started = Instant::now();
    let insts = suite::oracle_instances(SEED, 1000);
    let r = suite::check_order_preservation(SEED, &insts);
    verdict(
        6,
        started,
        Duration::from_secs(60),
        r.passed() && r.instances == 1000,
        format!("{} instances, failures {:?}", r.instances, r.failures),
    );
}

#[test]
fn criterion_07_causality() {
    let _g = lock();
    let started = Instant::now();
    let r = suite::check_causality(SEED, 100);
    verdict(
        7,
        started,
        Duration::from_secs(60),
        r.passed() && r.instances == 100,
        format!("{} prefix pairs, failures {:?}", r.instances, r.failures),
    );
}

#[test]
fn criterion_08_attention_invariants() {
    let _g = lock();
    let started = Instant::now();
    let (sums, dup) = suite::check_attention(SEED, 100);
    verdict(
        8,
        started,
        Duration::from_secs(30),
        sums.passed() && dup.passed() && dup.instances == 100,
        format!(
            "max row-sum error {:e}, max duplication diff {:e} over {} cases",
            sums.max_error, dup.max_error, dup.instances
        ),
    );
}

#[test]
fn criterion_09_gradient_check() {
    let _g = lock();
    let started = Instant::now();
    let cfg = suite::gradient_check_config();
    let q = &cfg.qformer;
    let shape_ok = q.num_blocks == 2 && q.num_queries == 4 && q.channels == 8 && q.bank_capacity == 3;
    let r = suite::check_gradients(SEED, &cfg, 4);
    verdict(
        9,
        started,
        Duration::from_secs(120),
        shape_ok && r.passed(),
        format!(
            "{} parameter elements, {} over 1e-4, max rel error {:e}",
            r.instances,
            r.failures.len(),
            r.max_error
        ),
    );
}

#[test]
fn criterion_10_segment_coverage() {
    let _g = lock();
    let started = Instant::now();
    let r = suite::check_segment_coverage(SEED);
    verdict(
        10,
        started,
        Duration::from_secs(30),
        r.passed() && r.instances == 4,
        format!("K=5, M=5: failures {:?} ({})", r.failures, r.note.clone().unwrap_or_default()),
    );
}

#[test]
fn criterion_11_ablation_direction() {
    let _g = lock();
    let started = Instant::now();
    let base = AblateArgs {
        dataset: None,
        policies: vec!["mbc".into(), "fifo".into()],
        epochs: 500,
        lr: 0.3,
        clip_norm: 1.0,
        batch_size: 0,
        optimizer: "sgd".into(),
        bank_size: 4,
        no_visual_bank: false,
        no_query_bank: false,
        seed: SEED,
    };
    let rows = ablate::run(&base).unwrap();
    let (mbc, fifo) = (&rows[0], &rows[1]);
    let long_enough = mbc.frames > 2 * mbc.bank_size;
    let direction = mbc.eval_accuracy == 1.0 && fifo.eval_accuracy <= 0.5 + 0.1;
    let off = ablate::run(&AblateArgs {
        policies: vec!["mbc".into()],
        epochs: 1,
        no_visual_bank: true,
        no_query_bank: true,
        ..base
    })
    .unwrap();
    let shape = off[0].peak_kv_rows == off[0].tokens && off[0].peak_query_kv_rows == off[0].queries;
    verdict(
        11,
        started,
        Duration::from_secs(600),
        long_enough && direction && shape,
        format!(
            "T={} M={}: mbc eval acc {}, fifo eval acc {}; banks off kv rows {}/{} (P={}, N={})",
            mbc.frames,
            mbc.bank_size,
            mbc.eval_accuracy,
            fifo.eval_accuracy,
            off[0].peak_kv_rows,
            off[0].peak_query_kv_rows,
            off[0].tokens,
            off[0].queries
        ),
    );
}

#[test]
fn criterion_12_bank_length_trend() {
    let _g = lock();
    let started = Instant::now();
    let k = 4;
    let rows = banklen::run(&BanklenArgs {
        lengths_list: (1..=2 * k).collect(),
        segments: k,
        segment_len: 3,
        tokens: 2,
        channels: 8,
        train_per_class: 16,
        eval_per_class: 32,
        first_noise: 0.05,
        later_noise: 0.15,
        epochs: 300,
        lr: 0.3,
        clip_norm: 1.0,
        seed: SEED,
    })
    .unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r.eval_accuracy).collect();
    let monotone = acc.windows(2).all(|w| w[1] >= w[0]);
    let full = rows.iter().filter(|r| r.bank_length >= k).all(|r| r.eval_accuracy == 1.0);
    verdict(
        12,
        started,
        Duration::from_secs(600),
        monotone && full,
        format!("K={k}, eval accuracy for M=1..={}: {acc:?}", 2 * k),
    );
}
