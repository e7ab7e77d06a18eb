//! Built-in synthetic classification tasks.
//!
//! In both, the label is the basis (0 or 1) of the first segment and every
//! later segment uses its own basis from 2 upward, so the label is only
//! recoverable from what the model retains of the stream's beginning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetItem, LabeledDataset, Split};
use super::model::{Aggregation, ModelConfig};
use super::position::PositionEncoding;
use super::synthetic::{Segment, SyntheticSpec};
use crate::error::{Error, Result};
use crate::memory_bank::CompressionPolicy;
use crate::qformer::QFormerConfig;

/// A short labeled opening followed by noiseless distractor segments that
/// are identical across items. With `first_len <= frames - 2 * M`, a FIFO
/// model's final input carries no label information at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallTask {
    pub seed: u64,
    pub frames: usize,
    pub first_len: usize,
    pub tokens: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Noise on the opening segment only.
    pub noise: f64,
}

impl Default for RecallTask {
    fn default() -> Self {
        RecallTask {
            seed: 0,
            frames: 12,
            first_len: 4,
            tokens: 2,
            channels: 8,
            train_per_class: 8,
            eval_per_class: 16,
            noise: 0.05,
        }
    }
}

/// `segments` equal-length segments; all but the first carry noise, so a
/// first-segment token that gets averaged into later ones loses signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTask {
    pub seed: u64,
    pub segments: usize,
    pub segment_len: usize,
    pub tokens: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub first_noise: f64,
    pub later_noise: f64,
}

impl Default for CoverageTask {
    fn default() -> Self {
        CoverageTask {
            seed: 0,
            segments: 4,
            segment_len: 3,
            tokens: 2,
            channels: 8,
            train_per_class: 16,
            eval_per_class: 32,
            first_noise: 0.05,
            later_noise: 0.15,
        }
    }
}

fn build(
    seed: u64,
    train_per_class: usize,
    eval_per_class: usize,
    mut spec_for: impl FnMut(u64, usize) -> SyntheticSpec,
) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for (split, per_class) in [(Split::Train, train_per_class), (Split::Eval, eval_per_class)] {
        for _ in 0..per_class {
            for label in 0..2 {
                items.push(DatasetItem::synthetic(spec_for(rng.random(), label), split));
            }
        }
    }
    LabeledDataset::new(items, Default::default())
}

pub fn first_segment_recall(task: &RecallTask) -> Result<LabeledDataset> {
    if task.channels < 4 {
        return Err(Error::Config("recall task needs at least 4 channels".into()));
    }
    if task.first_len == 0 || task.first_len + 2 > task.frames {
        return Err(Error::Config(format!(
            "first_len {} leaves no room for two distractor segments in {} frames",
            task.first_len, task.frames
        )));
    }
    let rest = task.frames - task.first_len;
    build(task.seed, task.train_per_class, task.eval_per_class, |seed, label| SyntheticSpec {
        seed,
        frames: task.frames,
        tokens: task.tokens,
        channels: task.channels,
        segments: vec![
            Segment {
                length: task.first_len,
                basis: label,
                noise: task.noise,
            },
            Segment {
                length: rest / 2,
                basis: 2,
                noise: 0.0,
            },
            Segment {
                length: rest - rest / 2,
                basis: 3,
                noise: 0.0,
            },
        ],
        label,
    })
}

pub fn segment_coverage(task: &CoverageTask) -> Result<LabeledDataset> {
    if task.segments < 2 || task.segment_len == 0 {
        return Err(Error::Config("coverage task needs >= 2 segments of length >= 1".into()));
    }
    if task.channels < task.segments + 1 {
        return Err(Error::Config(format!(
            "{} segments need at least {} channels",
            task.segments,
            task.segments + 1
        )));
    }
    build(task.seed, task.train_per_class, task.eval_per_class, |seed, label| {
        let mut segments = vec![Segment {
            length: task.segment_len,
            basis: label,
            noise: task.first_noise,
        }];
        segments.extend((1..task.segments).map(|i| Segment {
            length: task.segment_len,
            basis: i + 1,
            noise: task.later_noise,
        }));
        SyntheticSpec {
            seed,
            frames: task.segments * task.segment_len,
            tokens: task.tokens,
            channels: task.channels,
            segments,
            label,
        }
    })
}

/// The small model the built-in tasks are sized for: one block, two
/// queries, and a position embedding well below the unit-norm frame signal.
pub fn task_model(tokens: usize, channels: usize, bank_capacity: usize, policy: CompressionPolicy) -> ModelConfig {
    ModelConfig {
        qformer: QFormerConfig {
            num_blocks: 1,
            num_queries: 2,
            channels,
            num_heads: 2,
            ffn_hidden: 2 * channels,
            visual_tokens: tokens,
            bank_capacity,
            policy,
            ..QFormerConfig::default()
        },
        num_classes: 2,
        position: PositionEncoding::Sinusoidal { scale: 0.05 },
        aggregation: Aggregation::Memory,
    }
}
