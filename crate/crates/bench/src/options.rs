//! Shared option handling: policy names, `--config` overrides, and the
//! model configuration the sweeps run.

use std::path::Path;

use malmm_core::memory_bank::CompressionPolicy;
use malmm_core::pipeline::{Aggregation, ModelConfig, PositionEncoding};
use malmm_core::qformer::QFormerConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{BenchError, Result};

pub const POLICY_NAMES: [&str; 6] = ["mbc", "mbc_frame", "fifo", "none", "concat", "avgpool"];

/// Maps a policy name to the bank policy and aggregation it selects. The
/// baselines never compress, so their bank policy is irrelevant.
pub fn parse_policy(name: &str) -> Result<(CompressionPolicy, Aggregation)> {
    Ok(match name {
        "mbc" => (CompressionPolicy::MBC_TOKEN, Aggregation::Memory),
        "mbc_frame" => (CompressionPolicy::MBC_FRAME, Aggregation::Memory),
        "fifo" => (CompressionPolicy::FIFO, Aggregation::Memory),
        "none" => (CompressionPolicy::NONE, Aggregation::Memory),
        "concat" => (CompressionPolicy::NONE, Aggregation::Concat),
        "avgpool" => (CompressionPolicy::NONE, Aggregation::AvgPool),
        other => {
            return Err(BenchError::Usage(format!(
                "unknown policy `{other}` (expected one of {})",
                POLICY_NAMES.join(", ")
            )))
        }
    })
}

/// Overlays the keys of a JSON config file onto already-parsed arguments.
/// The file may be a bare argument object or a previous report, in which
/// case its `config` member is used.
pub fn apply_config<T: Serialize + DeserializeOwned>(args: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(path)?;
    let mut overlay: Value = serde_json::from_str(&text)?;
    if let Some(inner) = overlay.get("config").filter(|v| v.is_object()) {
        overlay = inner.clone();
    }
    let Value::Object(overlay) = overlay else {
        return Err(BenchError::Usage(format!("{}: config must be a JSON object", path.display())));
    };
    let mut base = serde_json::to_value(args)?;
    let fields = base.as_object_mut().expect("argument structs serialize to objects");
    for (k, v) in overlay {
        if !fields.contains_key(&k) {
            return Err(BenchError::Usage(format!("{}: unknown option `{k}`", path.display())));
        }
        fields.insert(k, v);
    }
    serde_json::from_value(base).map_err(|e| BenchError::Usage(format!("{}: {e}", path.display())))
}

/// Model shape flags shared by the scaling and timing sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize, clap::Args)]
pub struct ModelShape {
    /// Memory bank capacity M.
    #[arg(long, default_value_t = 20)]
    pub bank_size: usize,
    /// Learned queries N.
    #[arg(long, default_value_t = 8)]
    pub queries: usize,
    /// Spatial tokens per frame P.
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    /// Channels C.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Q-Former blocks L.
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    /// Attention heads H.
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            bank_size: 20,
            queries: 8,
            tokens: 4,
            channels: 16,
            blocks: 2,
            heads: 2,
        }
    }
}

impl ModelShape {
    pub fn model_config(&self, policy: &str) -> Result<ModelConfig> {
        let (policy, aggregation) = parse_policy(policy)?;
        let config = ModelConfig {
            qformer: QFormerConfig {
                num_blocks: self.blocks,
                num_queries: self.queries,
                channels: self.channels,
                num_heads: self.heads,
                ffn_hidden: 2 * self.channels,
                visual_tokens: self.tokens,
                bank_capacity: self.bank_size,
                policy,
                ..QFormerConfig::default()
            },
            num_classes: 2,
            position: PositionEncoding::default(),
            aggregation,
        };
        config.validate().map_err(|e| BenchError::Usage(e.to_string()))?;
        Ok(config)
    }
}

pub fn strictly_increasing(name: &str, values: &[usize]) -> Result<()> {
    if values.is_empty() {
        return Err(BenchError::Usage(format!("--{name} must not be empty")));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::Usage(format!("--{name} must be strictly increasing, got {values:?}")));
    }
    if values[0] == 0 {
        return Err(BenchError::Usage(format!("--{name} values must be >= 1")));
    }
    Ok(())
}
