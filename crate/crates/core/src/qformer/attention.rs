use crate::autodiff::{Eval, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::AttentionParams;

/// Multi-head scaled dot-product attention of `queries` (`N x C`) over `kv`
/// (`R x C`), followed by the output projection. Each head scales its scores
/// by `1/sqrt(C/H)`; with one head that is `1/sqrt(C)`.
///
/// Returns the output and each head's `N x R` attention matrix.
pub fn attend<G: Graph>(
    g: &mut G,
    queries: &G::Var,
    kv: &G::Var,
    p: &AttentionParams<G::Var>,
    heads: usize,
) -> Result<(G::Var, Vec<G::Var>)> {
    let c = g.value(queries).cols();
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels cannot split into {heads} heads")));
    }
    if g.value(kv).cols() != c {
        return Err(Error::shape("attention kv", g.value(queries).shape(), g.value(kv).shape()));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let q = g.matmul(queries, &p.w_q)?;
    let k = g.matmul(kv, &p.w_k)?;
    let v = g.matmul(kv, &p.w_v)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (
                g.slice_cols(&q, h * d, d)?,
                g.slice_cols(&k, h * d, d)?,
                g.slice_cols(&v, h * d, d)?,
            )
        };
        let kt = g.transpose(&kh)?;
        let scores = g.matmul(&qh, &kt)?;
        let scores = g.scale(&scores, scale)?;
        let a = g.softmax_rows(&scores)?;
        outs.push(g.matmul(&a, &vh)?);
        weights.push(a);
    }
    let merged = if heads == 1 {
        outs.pop().expect("one head")
    } else {
        g.concat_cols(&outs)?
    };
    Ok((g.matmul(&merged, &p.w_o)?, weights))
}

pub fn attention(queries: &Tensor, kv: &Tensor, p: &AttentionParams, heads: usize) -> Result<Tensor> {
    attend(&mut Eval, queries, kv, p, heads).map(|(out, _)| out)
}

pub fn attention_weights(queries: &Tensor, kv: &Tensor, p: &AttentionParams, heads: usize) -> Result<Vec<Tensor>> {
    attend(&mut Eval, queries, kv, p, heads).map(|(_, w)| w)
}
