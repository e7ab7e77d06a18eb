use rand::Rng;
use serde::{Deserialize, Serialize};

use super::position::{position_embed_scaled, PositionEncoding};
use crate::autodiff::{Graph, RowTerm};
use crate::error::{Error, Result};
use crate::memory_bank::CompressionKind;
use crate::qformer::{step_on, BankMirrors, NamedTensors, QFormerConfig, QFormerParams, QFormerState};
use crate::tensor::Tensor;

/// How the per-frame Q-Former outputs become the final token set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Streaming with memory banks; the final step's queries are the output.
    #[default]
    Memory,
    /// Each frame runs alone; outputs are stacked over time (`N*T x C`).
    Concat,
    /// Each frame runs alone; outputs are averaged over time (`N x C`).
    AvgPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub qformer: QFormerConfig,
    pub num_classes: usize,
    #[serde(default)]
    pub position: PositionEncoding,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.qformer.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        match self.position {
            PositionEncoding::Sinusoidal { scale } if !scale.is_finite() => {
                Err(Error::Config("position scale must be finite".into()))
            }
            PositionEncoding::Learned { max_len: 0 } => Err(Error::Config("learned position table needs max_len >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Bank capacity for a stream of `frames`: uncompressed banks are sized
    /// to hold the whole stream.
    pub fn capacity_for(&self, frames: usize) -> usize {
        match self.qformer.policy.kind {
            CompressionKind::None => self.qformer.bank_capacity.max(frames),
            _ => self.qformer.bank_capacity,
        }
    }
}

/// Linear classifier on mean-pooled tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = Tensor> {
    /// `C x K`.
    pub weight: T,
    /// `1 x K`.
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub qformer: QFormerParams<T>,
    pub head: HeadParams<T>,
    /// Learned position table (`max_len x C`), when configured.
    pub position: Option<T>,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            qformer: self.qformer.map(f),
            head: HeadParams {
                weight: f(&self.head.weight),
                bias: f(&self.head.bias),
            },
            position: self.position.as_ref().map(f),
        }
    }
}

impl ModelParams {
    pub fn init(rng: &mut impl Rng, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.qformer.channels;
        let qformer = QFormerParams::init(rng, &config.qformer);
        let weight = crate::qformer::gaussian(rng, &[c, config.num_classes], 1.0 / (c as f64).sqrt());
        let position = match config.position {
            PositionEncoding::Learned { max_len } => Some(crate::qformer::gaussian(rng, &[max_len, c], 0.02)),
            PositionEncoding::Sinusoidal { .. } => None,
        };
        Ok(ModelParams {
            qformer,
            head: HeadParams {
                weight,
                bias: Tensor::zeros(&[1, config.num_classes]),
            },
            position,
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.shape()))
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.is_finite())
    }
}

impl<T> NamedTensors<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.qformer.visit(&join(prefix, "qformer"), f);
        f(join(prefix, "head.weight"), &self.head.weight);
        f(join(prefix, "head.bias"), &self.head.bias);
        if let Some(p) = &self.position {
            f(join(prefix, "position"), p);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.qformer.visit_mut(&join(prefix, "qformer"), f);
        f(join(prefix, "head.weight"), &mut self.head.weight);
        f(join(prefix, "head.bias"), &mut self.head.bias);
        if let Some(p) = &mut self.position {
            f(join(prefix, "position"), p);
        }
    }
}

/// `f_t = v_t + PE(t)` on the graph. Sinusoidal embeddings are folded into a
/// constant; a learned table contributes row `t - 1`, broadcast over `P`.
pub fn embed_frame<G: Graph>(
    g: &mut G,
    config: &ModelConfig,
    params: &ModelParams<G::Var>,
    frame: Tensor,
    t: u64,
) -> Result<G::Var> {
    if t < 1 {
        return Err(Error::InvalidTimestep(t));
    }
    match (config.position, &params.position) {
        (PositionEncoding::Sinusoidal { scale }, _) => Ok(g.constant(position_embed_scaled(&frame, t, scale)?)),
        (PositionEncoding::Learned { max_len }, Some(table)) => {
            if t as usize > max_len {
                return Err(Error::Config(format!("timestep {t} exceeds learned position table length {max_len}")));
            }
            let rows = vec![vec![RowTerm::new(0, t as usize - 1, 1.0)]; frame.rows()];
            let pe = g.mix_rows(std::slice::from_ref(table), &rows)?;
            let v = g.constant(frame);
            g.add(&v, &pe)
        }
        (PositionEncoding::Learned { .. }, None) => Err(Error::Config("learned position table missing from params".into())),
    }
}

/// Runs one frame through a fresh state, as the first step of its own
/// length-one stream.
pub fn isolated_frame<G: Graph>(
    g: &mut G,
    config: &ModelConfig,
    params: &ModelParams<G::Var>,
    frame: Tensor,
) -> Result<G::Var> {
    let mut state = QFormerState::with_capacity(&config.qformer, 1)?;
    let mut mirrors = BankMirrors::new(config.qformer.num_blocks);
    let f = embed_frame(g, config, params, frame, 1)?;
    step_on(g, &mut state, &mut mirrors, &params.qformer, &config.qformer, &f)
}

/// Final token set for a materialized stream, under `config.aggregation`.
pub fn forward_tokens<G: Graph>(
    g: &mut G,
    config: &ModelConfig,
    params: &ModelParams<G::Var>,
    frames: &[Tensor],
) -> Result<G::Var> {
    if frames.is_empty() {
        return Err(Error::Config("empty stream".into()));
    }
    match config.aggregation {
        Aggregation::Memory => {
            let mut state = QFormerState::with_capacity(&config.qformer, config.capacity_for(frames.len()))?;
            let mut mirrors = BankMirrors::new(config.qformer.num_blocks);
            let mut z = None;
            for (i, frame) in frames.iter().enumerate() {
                let f = embed_frame(g, config, params, frame.clone(), i as u64 + 1)?;
                z = Some(step_on(g, &mut state, &mut mirrors, &params.qformer, &config.qformer, &f)?);
            }
            Ok(z.expect("non-empty stream"))
        }
        Aggregation::Concat => {
            let outs = frames
                .iter()
                .map(|f| isolated_frame(g, config, params, f.clone()))
                .collect::<Result<Vec<_>>>()?;
            if outs.len() == 1 {
                Ok(outs[0].clone())
            } else {
                g.concat_rows(&outs)
            }
        }
        Aggregation::AvgPool => {
            let mut mean: Option<G::Var> = None;
            for (i, f) in frames.iter().enumerate() {
                let z = isolated_frame(g, config, params, f.clone())?;
                mean = Some(match mean {
                    None => z,
                    Some(m) => running_mean(g, &m, &z, i + 1)?,
                });
            }
            Ok(mean.expect("non-empty stream"))
        }
    }
}

/// `m + (z - m) / n`; exact when every `z` is equal.
pub(crate) fn running_mean<G: Graph>(g: &mut G, m: &G::Var, z: &G::Var, n: usize) -> Result<G::Var> {
    let d = g.sub(z, m)?;
    let d = g.scale(&d, 1.0 / n as f64)?;
    g.add(m, &d)
}

/// Mean-pools the token rows and applies the linear head: `1 x K` logits.
pub fn classify<G: Graph>(g: &mut G, head: &HeadParams<G::Var>, tokens: &G::Var) -> Result<G::Var> {
    let (rows, cols) = {
        let t = g.value(tokens);
        (t.rows(), t.cols())
    };
    let w = g.value(&head.weight).shape().to_vec();
    if w.len() != 2 || w[0] != cols {
        return Err(Error::shape("classify", &[rows, cols], &w));
    }
    let pool = g.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
    let pooled = g.matmul(&pool, tokens)?;
    let logits = g.matmul(&pooled, &head.weight)?;
    g.add(&logits, &head.bias)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    Ok(crate::autodiff::cross_entropy_forward(logits, label)?.0)
}

pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, &x) in logits.data().iter().enumerate() {
        if x > logits.data()[best] {
            best = i;
        }
    }
    best
}
