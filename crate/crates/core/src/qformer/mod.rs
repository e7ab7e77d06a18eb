//! A small cascaded Q-Former whose attention reads from memory banks.
//!
//! Each block runs (by default) self-attention over its own query bank, then
//! cross-attention over the single shared visual bank, then a feed-forward
//! layer, all pre-norm with residuals.

mod attention;
pub mod checkpoint;
mod params;
mod state;

use serde::{Deserialize, Serialize};

pub use attention::{attend, attention, attention_weights};
pub(crate) use params::gaussian;
pub use params::{AttentionParams, BlockParams, LayerNormParams, NamedTensors, QFormerParams};
pub use state::{block_forward, causality_probe, step, step_on, BankMirrors, QFormerState};

use crate::error::{Error, Result};
use crate::memory_bank::CompressionPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerOrder {
    #[default]
    SelfFirst,
    CrossFirst,
}

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFormerConfig {
    pub num_blocks: usize,
    pub num_queries: usize,
    pub channels: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub visual_tokens: usize,
    pub bank_capacity: usize,
    pub policy: CompressionPolicy,
    #[serde(default)]
    pub sublayer_order: SublayerOrder,
    /// When false, cross-attention only sees the current frame.
    #[serde(default = "default_true")]
    pub use_visual_bank: bool,
    /// When false, self-attention only sees the current queries.
    #[serde(default = "default_true")]
    pub use_query_bank: bool,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        QFormerConfig {
            num_blocks: 2,
            num_queries: 8,
            channels: 16,
            num_heads: 2,
            ffn_hidden: 32,
            visual_tokens: 4,
            bank_capacity: 20,
            policy: CompressionPolicy::MBC_TOKEN,
            sublayer_order: SublayerOrder::SelfFirst,
            use_visual_bank: true,
            use_query_bank: true,
            ln_eps: default_eps(),
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("num_queries", self.num_queries),
            ("channels", self.channels),
            ("num_heads", self.num_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("visual_tokens", self.visual_tokens),
            ("bank_capacity", self.bank_capacity),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.channels.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by num_heads {}",
                self.channels, self.num_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.num_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_indivisible_heads() {
        let cfg = QFormerConfig {
            channels: 10,
            num_heads: 3,
            ..QFormerConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(QFormerConfig::default().validate().is_ok());
    }

    #[test]
    fn config_json_defaults() {
        let json = r#"{"num_blocks":1,"num_queries":2,"channels":8,"num_heads":1,"ffn_hidden":8,
            "visual_tokens":1,"bank_capacity":4,"policy":{"kind":"fifo"}}"#;
        let cfg: QFormerConfig = serde_json::from_str(json).unwrap();
        assert!(cfg.use_visual_bank && cfg.use_query_bank);
        assert_eq!(cfg.sublayer_order, SublayerOrder::SelfFirst);
        assert_eq!(cfg.policy, CompressionPolicy::FIFO);
    }
}
