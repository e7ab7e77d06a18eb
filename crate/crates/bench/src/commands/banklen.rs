//! Eval accuracy against memory bank length on the segment coverage task.

use malmm_core::memory_bank::CompressionPolicy;
use malmm_core::pipeline::tasks::{segment_coverage, task_model, CoverageTask};
use malmm_core::pipeline::{evaluate, train, Split, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::options::strictly_increasing;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, clap::Args)]
pub struct BanklenArgs {
    /// Bank lengths M to train at.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    pub lengths_list: Vec<usize>,
    /// Segments K in each stream.
    #[arg(long, default_value_t = 4)]
    pub segments: usize,
    #[arg(long, default_value_t = 3)]
    pub segment_len: usize,
    #[arg(long, default_value_t = 2)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 16)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub eval_per_class: usize,
    #[arg(long, default_value_t = 0.05)]
    pub first_noise: f64,
    #[arg(long, default_value_t = 0.15)]
    pub later_noise: f64,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = crate::default_seed())]
    pub seed: u64,
}

/// The plot-ready two-column CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanklenPoint {
    pub bank_length: usize,
    pub eval_accuracy: f64,
}

/// Full per-length detail, written to the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanklenRow {
    pub bank_length: usize,
    pub segments: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

impl BanklenRow {
    pub fn point(&self) -> BanklenPoint {
        BanklenPoint {
            bank_length: self.bank_length,
            eval_accuracy: self.eval_accuracy,
        }
    }
}

pub fn run(args: &BanklenArgs) -> Result<Vec<BanklenRow>> {
    strictly_increasing("lengths-list", &args.lengths_list)?;
    let task = CoverageTask {
        seed: args.seed,
        segments: args.segments,
        segment_len: args.segment_len,
        tokens: args.tokens,
        channels: args.channels,
        train_per_class: args.train_per_class,
        eval_per_class: args.eval_per_class,
        first_noise: args.first_noise,
        later_noise: args.later_noise,
    };
    let dataset = segment_coverage(&task).map_err(|e| BenchError::Usage(e.to_string()))?;
    let train_set = dataset.examples(Split::Train)?;
    let eval_set = dataset.examples(Split::Eval)?;
    let train_config = TrainConfig {
        seed: args.seed,
        epochs: args.epochs,
        lr: args.lr,
        batch_size: 0,
        optimizer: Default::default(),
        clip_norm: (args.clip_norm > 0.0).then_some(args.clip_norm),
    };
    args.lengths_list
        .iter()
        .map(|&m| {
            let config = task_model(args.tokens, args.channels, m, CompressionPolicy::MBC_TOKEN);
            let outcome = train(&train_set, &config, &train_config)?;
            let tr = evaluate(&outcome.params, &config, &train_set)?;
            let ev = evaluate(&outcome.params, &config, &eval_set)?;
            Ok(BanklenRow {
                bank_length: m,
                segments: args.segments,
                seed: args.seed,
                train_loss: tr.loss,
                train_accuracy: tr.accuracy,
                eval_loss: ev.loss,
                eval_accuracy: ev.accuracy,
            })
        })
        .collect()
}
