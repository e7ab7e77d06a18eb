use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::QFormerConfig;
use crate::tensor::Tensor;

/// Parameter trees that can be walked in a fixed order by name. The order is
/// what ties together a parameter set, its tape variables and its gradients.
pub trait NamedTensors<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T));

    fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("valid shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
        }
    }
}

impl AttentionParams {
    pub fn init(rng: &mut impl Rng, channels: usize) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        AttentionParams {
            w_q: gaussian(rng, &[channels, channels], std),
            w_k: gaussian(rng, &[channels, channels], std),
            w_v: gaussian(rng, &[channels, channels], std),
            w_o: gaussian(rng, &[channels, channels], std),
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut eye = Tensor::zeros(&[channels, channels]);
        for i in 0..channels {
            eye.data_mut()[i * channels + i] = 1.0;
        }
        AttentionParams {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
        }
    }
}

impl<T> NamedTensors<T> for AttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "w_q"), &self.w_q);
        f(join(prefix, "w_k"), &self.w_k);
        f(join(prefix, "w_v"), &self.w_v);
        f(join(prefix, "w_o"), &self.w_o);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "w_q"), &mut self.w_q);
        f(join(prefix, "w_k"), &mut self.w_k);
        f(join(prefix, "w_v"), &mut self.w_v);
        f(join(prefix, "w_o"), &mut self.w_o);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl LayerNormParams {
    pub fn init(channels: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }
}

impl<T> NamedTensors<T> for LayerNormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub self_attn: AttentionParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub ln_self: LayerNormParams<T>,
    pub ln_cross: LayerNormParams<T>,
    pub ln_ffn: LayerNormParams<T>,
    /// `C x ffn_hidden`
    pub ffn_in: T,
    /// `ffn_hidden x C`
    pub ffn_out: T,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            self_attn: self.self_attn.map(f),
            cross_attn: self.cross_attn.map(f),
            ln_self: self.ln_self.map(f),
            ln_cross: self.ln_cross.map(f),
            ln_ffn: self.ln_ffn.map(f),
            ffn_in: f(&self.ffn_in),
            ffn_out: f(&self.ffn_out),
        }
    }
}

impl BlockParams {
    pub fn init(rng: &mut impl Rng, config: &QFormerConfig) -> Self {
        let c = config.channels;
        let h = config.ffn_hidden;
        BlockParams {
            self_attn: AttentionParams::init(rng, c),
            cross_attn: AttentionParams::init(rng, c),
            ln_self: LayerNormParams::init(c),
            ln_cross: LayerNormParams::init(c),
            ln_ffn: LayerNormParams::init(c),
            ffn_in: gaussian(rng, &[c, h], 1.0 / (c as f64).sqrt()),
            ffn_out: gaussian(rng, &[h, c], 1.0 / (h as f64).sqrt()),
        }
    }
}

impl<T> NamedTensors<T> for BlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.ln_self.visit(&join(prefix, "ln_self"), f);
        self.ln_cross.visit(&join(prefix, "ln_cross"), f);
        self.ln_ffn.visit(&join(prefix, "ln_ffn"), f);
        f(join(prefix, "ffn_in"), &self.ffn_in);
        f(join(prefix, "ffn_out"), &self.ffn_out);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.ln_self.visit_mut(&join(prefix, "ln_self"), f);
        self.ln_cross.visit_mut(&join(prefix, "ln_cross"), f);
        self.ln_ffn.visit_mut(&join(prefix, "ln_ffn"), f);
        f(join(prefix, "ffn_in"), &mut self.ffn_in);
        f(join(prefix, "ffn_out"), &mut self.ffn_out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerParams<T = Tensor> {
    /// Learned queries, `N x C`.
    pub queries: T,
    pub blocks: Vec<BlockParams<T>>,
}

impl<T> QFormerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> QFormerParams<U> {
        QFormerParams {
            queries: f(&self.queries),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
        }
    }
}

impl QFormerParams {
    pub fn init(rng: &mut impl Rng, config: &QFormerConfig) -> Self {
        QFormerParams {
            queries: gaussian(rng, &[config.num_queries, config.channels], 1.0),
            blocks: (0..config.num_blocks).map(|_| BlockParams::init(rng, config)).collect(),
        }
    }

    /// Expected `(name, shape)` list for `config`, in visit order.
    pub fn expected_shapes(config: &QFormerConfig) -> Vec<(String, Vec<usize>)> {
        let mut rng = rand::rng();
        let template = QFormerParams::init(&mut rng, config);
        template.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
    }
}

impl<T> NamedTensors<T> for QFormerParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "queries"), &self.queries);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{l}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "queries"), &mut self.queries);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{l}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_ordered() {
        let cfg = QFormerConfig::default();
        let p = QFormerParams::init(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "queries");
        assert_eq!(names[1], "blocks.0.self_attn.w_q");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 1 + cfg.num_blocks * 16);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = QFormerConfig::default();
        let a = QFormerParams::init(&mut ChaCha8Rng::seed_from_u64(4), &cfg);
        let b = QFormerParams::init(&mut ChaCha8Rng::seed_from_u64(4), &cfg);
        assert_eq!(a, b);
    }
}
