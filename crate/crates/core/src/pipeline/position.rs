use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How temporal position is injected into each frame before it enters the
/// visual bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionEncoding {
    /// Fixed sinusoid, multiplied by `scale`.
    Sinusoidal { scale: f64 },
    /// A trainable `max_len x C` table; timestep `t` uses row `t - 1`.
    Learned { max_len: usize },
}

impl Default for PositionEncoding {
    fn default() -> Self {
        PositionEncoding::Sinusoidal { scale: 1.0 }
    }
}

/// Channel `2j` is `sin(t / 10000^(2j/C))`, channel `2j+1` the matching cos.
pub fn sinusoid(t: u64, channels: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| {
            let pair = (c / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / channels as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// `v + scale * PE(t)`, the same vector added at every spatial position.
pub fn position_embed_scaled(v: &Tensor, t: u64, scale: f64) -> Result<Tensor> {
    if t < 1 {
        return Err(Error::InvalidTimestep(t));
    }
    let pe = sinusoid(t, v.cols());
    let mut out = v.clone();
    for r in 0..out.rows() {
        for (x, p) in out.row_mut(r).iter_mut().zip(&pe) {
            *x += scale * p;
        }
    }
    Ok(out)
}

pub fn position_embed(v: &Tensor, t: u64) -> Result<Tensor> {
    position_embed_scaled(v, t, 1.0)
}
