//! Trains one model per temporal-aggregation policy on the same dataset and
//! reports accuracy, loss, and token/memory columns side by side.

use std::path::PathBuf;

use malmm_core::pipeline::tasks::{first_segment_recall, task_model, RecallTask};
use malmm_core::pipeline::{
    evaluate, run_stream, train, Example, FeatureStream, LabeledDataset, ModelConfig, Optimizer, Split, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::options::parse_policy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, clap::Args)]
pub struct AblateArgs {
    /// Dataset manifest; defaults to the built-in first-segment recall task.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "mbc,fifo,concat,avgpool,none")]
    pub policies: Vec<String>,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    /// Examples per update; 0 means full batch.
    #[arg(long, default_value_t = 0)]
    pub batch_size: usize,
    /// sgd or adamw.
    #[arg(long, default_value = "sgd")]
    pub optimizer: String,
    #[arg(long, default_value_t = 4)]
    pub bank_size: usize,
    /// Cross-attention sees only the current frame.
    #[arg(long)]
    #[serde(default)]
    pub no_visual_bank: bool,
    /// Self-attention sees only the current queries.
    #[arg(long)]
    #[serde(default)]
    pub no_query_bank: bool,
    #[arg(long, default_value_t = crate::default_seed())]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub policy: String,
    pub use_visual_bank: bool,
    pub use_query_bank: bool,
    pub frames: usize,
    pub bank_size: usize,
    pub queries: usize,
    pub tokens: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Measured on the first eval stream with the trained parameters.
    pub downstream_token_rows: usize,
    pub peak_kv_rows: usize,
    pub peak_query_kv_rows: usize,
    pub peak_resident_floats: usize,
    pub final_batch_loss: f64,
}

fn load(args: &AblateArgs) -> Result<LabeledDataset> {
    match &args.dataset {
        Some(path) => Ok(LabeledDataset::load_manifest(path)?),
        None => Ok(first_segment_recall(&RecallTask {
            seed: args.seed,
            ..RecallTask::default()
        })?),
    }
}

fn optimizer(name: &str) -> Result<Optimizer> {
    match name {
        "sgd" => Ok(Optimizer::Sgd),
        "adamw" => Ok(Optimizer::adamw()),
        other => Err(BenchError::Usage(format!("unknown optimizer `{other}` (expected sgd or adamw)"))),
    }
}

pub fn model_for_policy(args: &AblateArgs, policy: &str, probe: &Example, classes: usize) -> Result<ModelConfig> {
    let (bank_policy, aggregation) = parse_policy(policy)?;
    let [p, c] = [probe.frames[0].rows(), probe.frames[0].cols()];
    let mut config = task_model(p, c, args.bank_size, bank_policy);
    config.aggregation = aggregation;
    config.num_classes = classes;
    config.qformer.use_visual_bank = !args.no_visual_bank;
    config.qformer.use_query_bank = !args.no_query_bank;
    config.validate().map_err(|e| BenchError::Usage(e.to_string()))?;
    Ok(config)
}

pub fn run(args: &AblateArgs) -> Result<Vec<AblateRow>> {
    if args.policies.is_empty() {
        return Err(BenchError::Usage("--policies must not be empty".into()));
    }
    for p in &args.policies {
        parse_policy(p)?;
    }
    let train_config = TrainConfig {
        seed: args.seed,
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        optimizer: optimizer(&args.optimizer)?,
        clip_norm: (args.clip_norm > 0.0).then_some(args.clip_norm),
    };
    let dataset = load(args)?;
    let train_set = dataset.examples(Split::Train)?;
    let eval_set = dataset.examples(Split::Eval)?;
    let probe = eval_set
        .first()
        .or(train_set.first())
        .ok_or_else(|| BenchError::Usage("dataset has no examples".into()))?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(BenchError::Usage("dataset needs both train and eval items".into()));
    }
    let mut rows = Vec::with_capacity(args.policies.len());
    for policy in &args.policies {
        let config = model_for_policy(args, policy, probe, dataset.num_classes)?;
        let outcome = train(&train_set, &config, &train_config)?;
        let tr = evaluate(&outcome.params, &config, &train_set)?;
        let ev = evaluate(&outcome.params, &config, &eval_set)?;
        let shape = run_stream(FeatureStream::from_frames(probe.frames.clone())?, &outcome.params, &config)?;
        let q = &config.qformer;
        rows.push(AblateRow {
            policy: policy.clone(),
            use_visual_bank: q.use_visual_bank,
            use_query_bank: q.use_query_bank,
            frames: probe.frames.len(),
            bank_size: q.bank_capacity,
            queries: q.num_queries,
            tokens: q.visual_tokens,
            channels: q.channels,
            blocks: q.num_blocks,
            heads: q.num_heads,
            seed: args.seed,
            train_loss: tr.loss,
            train_accuracy: tr.accuracy,
            eval_loss: ev.loss,
            eval_accuracy: ev.accuracy,
            downstream_token_rows: shape.downstream_token_rows(),
            peak_kv_rows: shape.peak_visual_kv_rows(),
            peak_query_kv_rows: shape.peak_query_kv_rows(),
            peak_resident_floats: shape.peak_resident_floats,
            final_batch_loss: outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> AblateArgs {
        AblateArgs {
            dataset: None,
            policies: vec!["mbc".into()],
            epochs: 2,
            lr: 0.1,
            clip_norm: 1.0,
            batch_size: 0,
            optimizer: "sgd".into(),
            bank_size: 4,
            no_visual_bank: true,
            no_query_bank: true,
            seed: 0,
        }
    }

    #[test]
    fn disabled_banks_see_only_current_step() {
        let rows = run(&quick()).unwrap();
        assert_eq!(rows[0].peak_kv_rows, rows[0].tokens);
        assert_eq!(rows[0].peak_query_kv_rows, rows[0].queries);
    }

    #[test]
    fn unknown_names_rejected() {
        let a = AblateArgs {
            policies: vec!["lru".into()],
            ..quick()
        };
        assert!(matches!(run(&a), Err(BenchError::Usage(_))));
        let b = AblateArgs {
            optimizer: "lbfgs".into(),
            ..quick()
        };
        assert!(matches!(run(&b), Err(BenchError::Usage(_))));
    }
}
