use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Example;
use super::model::{argmax, classify, cross_entropy, forward_tokens, ModelConfig, ModelParams};
use crate::autodiff::{Eval, Graph, Tape};
use crate::error::{Error, Result};
use crate::qformer::NamedTensors;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

fn default_batch() -> usize {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Seeds parameter init and batch order.
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// Examples per update; 0 means the whole training set.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Rescales the batch gradient to at most this global L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean batch loss before each update.
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and gradients for one example, in [`NamedTensors`] leaf order.
pub fn example_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    example: &Example,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let vars = params.map(&mut |t| tape.param(t));
    let tokens = forward_tokens(&mut tape, config, &vars, &example.frames)?;
    let logits = classify(&mut tape, &vars.head, &tokens)?;
    let loss = tape.cross_entropy(&logits, example.label)?;
    let value = tape.value(&loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, vars.leaves().into_iter().map(|&id| grads.get(id).cloned()).collect()))
}

pub fn predict(params: &ModelParams, config: &ModelConfig, frames: &[Tensor]) -> Result<Tensor> {
    let tokens = forward_tokens(&mut Eval, config, params, frames)?;
    classify(&mut Eval, &params.head, &tokens)
}

pub fn evaluate(params: &ModelParams, config: &ModelConfig, examples: &[Example]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for ex in examples {
        let logits = predict(params, config, &ex.frames)?;
        loss += cross_entropy(&logits, ex.label)?;
        correct += usize::from(argmax(&logits) == ex.label);
    }
    let n = examples.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

struct AdamState {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

/// Trains from a fresh, seeded initialization.
pub fn train(examples: &[Example], config: &ModelConfig, train_config: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let params = ModelParams::init(&mut rng, config)?;
    train_from(params, examples, config, train_config, &mut rng)
}

pub fn train_from(
    mut params: ModelParams,
    examples: &[Example],
    config: &ModelConfig,
    tc: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    if let Some(ex) = examples.iter().find(|e| e.label >= config.num_classes) {
        return Err(Error::LabelRange {
            label: ex.label,
            classes: config.num_classes,
        });
    }
    if !(tc.lr >= 0.0 && tc.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be finite and >= 0", tc.lr)));
    }
    let batch = if tc.batch_size == 0 { examples.len() } else { tc.batch_size };
    let mut adam = match tc.optimizer {
        Optimizer::AdamW { .. } => Some(AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }),
        Optimizer::Sgd => None,
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_curve = Vec::new();
    for _ in 0..tc.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let step = loss_curve.len();
            let mut grad = params.zeros_like();
            let mut total = 0.0;
            // fixed reduction order: batch order, then leaf order
            for &i in chunk {
                let (loss, grads) = example_gradients(&params, config, &examples[i]).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
                    e => e,
                })?;
                total += loss;
                let mut k = 0;
                grad.visit_mut("", &mut |_, acc| {
                    if let Some(g) = &grads[k] {
                        for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += x;
                        }
                    }
                    k += 1;
                });
            }
            let loss = total / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            loss_curve.push(loss);
            let mut inv = 1.0 / chunk.len() as f64;
            if let Some(max) = tc.clip_norm {
                let norm = inv * grad.leaves().iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
                if norm > max {
                    inv *= max / norm;
                }
            }
            apply_update(&mut params, &grad, inv, tc, adam.as_mut());
            if !params.is_finite() {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
        }
    }
    Ok(TrainOutcome { params, loss_curve })
}

fn apply_update(params: &mut ModelParams, grad: &ModelParams, inv: f64, tc: &TrainConfig, adam: Option<&mut AdamState>) {
    let grads: Vec<&Tensor> = grad.leaves();
    let lr = tc.lr;
    match (tc.optimizer, adam) {
        (
            Optimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            },
            Some(state),
        ) => {
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t);
            let c2 = 1.0 - beta2.powi(state.t);
            let mut k = 0;
            state.m.visit_mut("", &mut |_, m| {
                for (x, g) in m.data_mut().iter_mut().zip(grads[k].data()) {
                    *x = beta1 * *x + (1.0 - beta1) * g * inv;
                }
                k += 1;
            });
            let mut k = 0;
            state.v.visit_mut("", &mut |_, v| {
                for (x, g) in v.data_mut().iter_mut().zip(grads[k].data()) {
                    *x = beta2 * *x + (1.0 - beta2) * (g * inv).powi(2);
                }
                k += 1;
            });
            let (ms, vs) = (state.m.leaves(), state.v.leaves());
            let mut k = 0;
            params.visit_mut("", &mut |_, p| {
                for ((x, m), v) in p.data_mut().iter_mut().zip(ms[k].data()).zip(vs[k].data()) {
                    let step = (m / c1) / ((v / c2).sqrt() + eps);
                    *x -= lr * (step + weight_decay * *x);
                }
                k += 1;
            });
        }
        _ => {
            let mut k = 0;
            params.visit_mut("", &mut |_, p| {
                for (x, g) in p.data_mut().iter_mut().zip(grads[k].data()) {
                    *x -= lr * g * inv;
                }
                k += 1;
            });
        }
    }
}
