//! Eager evaluation and tape-based reverse-mode differentiation behind one
//! [`Graph`] interface, so the Q-Former forward pass is written once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad, Tensor};

pub type NodeId = usize;

/// One contribution to an output row of [`Graph::mix_rows`]:
/// `coef * inputs[input].row(row)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowTerm {
    pub input: usize,
    pub row: usize,
    pub coef: f64,
}

impl RowTerm {
    pub fn new(input: usize, row: usize, coef: f64) -> Self {
        RowTerm { input, row, coef }
    }
}

/// The numeric operations the model needs. [`Eval`] computes them eagerly;
/// [`Tape`] also records them for [`Tape::backward`].
pub trait Graph {
    type Var: Clone;

    fn recording(&self) -> bool;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;
    fn constant(&mut self, t: Tensor) -> Self::Var;
    /// A trainable leaf. Only recorded leaves created here receive gradients.
    fn param(&mut self, t: &Tensor) -> Self::Var;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, a: &Self::Var, s: f64) -> Result<Self::Var>;
    fn softmax_rows(&mut self, a: &Self::Var) -> Result<Self::Var>;
    fn layer_norm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var, eps: f64) -> Result<Self::Var>;
    fn gelu(&mut self, a: &Self::Var) -> Result<Self::Var>;
    fn concat_rows(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn slice_rows(&mut self, a: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn concat_cols(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn slice_cols(&mut self, a: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn transpose(&mut self, a: &Self::Var) -> Result<Self::Var>;
    /// Sum of all elements, as a shape-`[1]` scalar.
    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var>;
    /// `-log softmax(logits)[label]` over the flattened logits.
    fn cross_entropy(&mut self, logits: &Self::Var, label: usize) -> Result<Self::Var>;
    /// Builds a matrix whose row `r` is `sum(term.coef * inputs[term.input].row(term.row))`
    /// over `rows[r]`. All inputs must share a column count.
    fn mix_rows(&mut self, inputs: &[Self::Var], rows: &[Vec<RowTerm>]) -> Result<Self::Var>;
}

pub(crate) fn cross_entropy_forward(logits: &Tensor, label: usize) -> Result<(f64, Vec<f64>)> {
    let k = logits.len();
    if label >= k {
        return Err(Error::LabelRange { label, classes: k });
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.data().iter().map(|x| (x - max).exp()).sum();
    let log_z = max + total.ln();
    let probs = logits.data().iter().map(|x| (x - log_z).exp()).collect();
    Ok((log_z - logits.data()[label], probs))
}

pub(crate) fn mix_rows_forward(inputs: &[&Tensor], rows: &[Vec<RowTerm>]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "mix_rows of nothing".into(),
    })?;
    let c = first.cols();
    if let Some(bad) = inputs.iter().find(|t| t.cols() != c) {
        return Err(Error::shape("mix_rows", first.shape(), bad.shape()));
    }
    let mut data = vec![0.0; rows.len() * c];
    for (r, terms) in rows.iter().enumerate() {
        let out = &mut data[r * c..(r + 1) * c];
        for term in terms {
            let src = inputs.get(term.input).ok_or_else(|| Error::InvalidShape {
                shape: vec![inputs.len()],
                reason: format!("mix_rows input {} out of range", term.input),
            })?;
            if term.row >= src.rows() {
                return Err(Error::InvalidShape {
                    shape: src.shape().to_vec(),
                    reason: format!("mix_rows row {} out of range", term.row),
                });
            }
            for (o, &x) in out.iter_mut().zip(src.row(term.row)) {
                *o += term.coef * x;
            }
        }
    }
    Tensor::matrix(rows.len(), c, data)
}

/// Eager evaluation; nothing is recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Graph for Eval {
    type Var = Tensor;

    fn recording(&self) -> bool {
        false
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        Ok(a.scale(s))
    }
    fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        a.softmax_rows()
    }
    fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        x.layer_norm(gamma, beta, eps)
    }
    fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.gelu())
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
    fn slice_rows(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        a.slice_rows(start, len)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
    }
    fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        a.slice_cols(start, len)
    }
    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        a.transpose()
    }
    fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(a.sum()))
    }
    fn cross_entropy(&mut self, logits: &Tensor, label: usize) -> Result<Tensor> {
        cross_entropy_forward(logits, label).map(|(loss, _)| Tensor::scalar(loss))
    }
    fn mix_rows(&mut self, inputs: &[Tensor], rows: &[Vec<RowTerm>]) -> Result<Tensor> {
        mix_rows_forward(&inputs.iter().collect::<Vec<_>>(), rows)
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Transpose(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    MixRows {
        inputs: Vec<NodeId>,
        rows: Vec<Vec<RowTerm>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of operations. Inputs of a node always precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every [`Graph::param`] leaf
/// that influenced it.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.nodes.len()) {
            Some(&bad) => Err(Error::UnknownNode(bad)),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(&[loss])?;
        let loss_value = &self.node(loss).value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss).map(|_| None).collect();
        adj[loss] = Some(Tensor::full(loss_value.shape(), 1.0));
        let mut out = Gradients::default();

        for id in (0..=loss).rev() {
            let Some(dy) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let acc = |target: NodeId, g: Tensor, adj: &mut Vec<Option<Tensor>>| -> Result<()> {
                if !self.nodes[target].requires_grad {
                    return Ok(());
                }
                match &mut adj[target] {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                            *e += x;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
                Ok(())
            };
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    out.grads.insert(id, dy);
                }
                Op::MatMul(a, b) => {
                    let av = &self.node(*a).value;
                    let bv = &self.node(*b).value;
                    if self.node(*a).requires_grad {
                        acc(*a, dy.matmul(&bv.transpose()?)?, &mut adj)?;
                    }
                    if self.node(*b).requires_grad {
                        acc(*b, av.transpose()?.matmul(&dy)?, &mut adj)?;
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone(), &mut adj)?;
                    acc(*b, dy, &mut adj)?;
                }
                Op::Sub(a, b) => {
                    acc(*b, dy.scale(-1.0), &mut adj)?;
                    acc(*a, dy, &mut adj)?;
                }
                Op::Mul(a, b) => {
                    let av = &self.node(*a).value;
                    let bv = &self.node(*b).value;
                    acc(*a, dy.mul(bv)?, &mut adj)?;
                    acc(*b, dy.mul(av)?, &mut adj)?;
                }
                Op::Scale(a, s) => acc(*a, dy.scale(*s), &mut adj)?,
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = dy.clone();
                    for r in 0..y.rows() {
                        let dot: f64 = dy.row(r).iter().zip(y.row(r)).map(|(g, p)| g * p).sum();
                        for (d, &p) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d = p * (*d - dot);
                        }
                    }
                    acc(*a, dx, &mut adj)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.node(*gamma).value;
                    let c = xhat.cols();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = Tensor::zeros(xhat.shape());
                    for r in 0..xhat.rows() {
                        let g_row = dy.row(r);
                        let h_row = xhat.row(r);
                        let dxhat: Vec<f64> = g_row.iter().zip(gv.data()).map(|(g, w)| g * w).collect();
                        for j in 0..c {
                            dgamma[j] += g_row[j] * h_row[j];
                            dbeta[j] += g_row[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(h_row).map(|(d, h)| d * h).sum();
                        let scale = inv_std[r] / c as f64;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = scale * (c as f64 * dxhat[j] - s1 - h_row[j] * s2);
                        }
                    }
                    acc(*x, dx, &mut adj)?;
                    acc(*gamma, Tensor::vector(dgamma)?, &mut adj)?;
                    acc(*beta, Tensor::vector(dbeta)?, &mut adj)?;
                }
                Op::Gelu(a) => {
                    let xv = &self.node(*a).value;
                    let mut dx = dy;
                    for (d, &x) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= gelu_grad(x);
                    }
                    acc(*a, dx, &mut adj)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.node(p).value.rows();
                        acc(p, dy.slice_rows(start, rows)?, &mut adj)?;
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = &self.node(*a).value;
                    let mut dx = Tensor::zeros(src.shape());
                    let c = src.cols();
                    dx.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                    acc(*a, dx, &mut adj)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.node(p).value.cols();
                        acc(p, dy.slice_cols(start, cols)?, &mut adj)?;
                        start += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &self.node(*a).value;
                    let mut dx = Tensor::zeros(src.shape());
                    let w = dy.cols();
                    for r in 0..dy.rows() {
                        dx.row_mut(r)[*start..*start + w].copy_from_slice(dy.row(r));
                    }
                    acc(*a, dx, &mut adj)?;
                }
                Op::Transpose(a) => acc(*a, dy.transpose()?, &mut adj)?,
                Op::Sum(a) => {
                    let g = dy.data()[0];
                    acc(*a, Tensor::full(self.node(*a).value.shape(), g), &mut adj)?;
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let g = dy.data()[0];
                    let mut dl = Tensor::zeros(self.node(*logits).value.shape());
                    for (j, (d, &p)) in dl.data_mut().iter_mut().zip(probs).enumerate() {
                        *d = g * (p - if j == *label { 1.0 } else { 0.0 });
                    }
                    acc(*logits, dl, &mut adj)?;
                }
                Op::MixRows { inputs, rows } => {
                    let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
                    for (r, terms) in rows.iter().enumerate() {
                        for term in terms {
                            let id = inputs[term.input];
                            if !self.node(id).requires_grad {
                                continue;
                            }
                            let g = grads[term.input].get_or_insert_with(|| Tensor::zeros(self.node(id).value.shape()));
                            for (o, &d) in g.row_mut(term.row).iter_mut().zip(dy.row(r)) {
                                *o += term.coef * d;
                            }
                        }
                    }
                    for (i, g) in grads.into_iter().enumerate() {
                        if let Some(g) = g {
                            acc(inputs[i], g, &mut adj)?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Graph for Tape {
    type Var = NodeId;

    fn recording(&self) -> bool {
        true
    }
    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        &self.nodes[*v].value
    }
    fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, t, &[])
    }
    fn param(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Param, t.clone(), &[])
    }
    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.check(&[*a, *b])?;
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(*a, *b), v, &[*a, *b]))
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.check(&[*a, *b])?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(*a, *b), v, &[*a, *b]))
    }
    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.check(&[*a, *b])?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(*a, *b), v, &[*a, *b]))
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.check(&[*a, *b])?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(*a, *b), v, &[*a, *b]))
    }
    fn scale(&mut self, a: &NodeId, s: f64) -> Result<NodeId> {
        self.check(&[*a])?;
        let v = self.value(a).scale(s);
        Ok(self.push(Op::Scale(*a, s), v, &[*a]))
    }
    fn softmax_rows(&mut self, a: &NodeId) -> Result<NodeId> {
        self.check(&[*a])?;
        let v = self.value(a).softmax_rows()?;
        Ok(self.push(Op::Softmax(*a), v, &[*a]))
    }
    fn layer_norm(&mut self, x: &NodeId, gamma: &NodeId, beta: &NodeId, eps: f64) -> Result<NodeId> {
        self.check(&[*x, *gamma, *beta])?;
        let (v, xhat, inv_std) = self.value(x).layer_norm_parts(self.value(gamma), self.value(beta), eps)?;
        let op = Op::LayerNorm {
            x: *x,
            gamma: *gamma,
            beta: *beta,
            xhat,
            inv_std,
        };
        Ok(self.push(op, v, &[*x, *gamma, *beta]))
    }
    fn gelu(&mut self, a: &NodeId) -> Result<NodeId> {
        self.check(&[*a])?;
        let v = self.value(a).gelu();
        Ok(self.push(Op::Gelu(*a), v, &[*a]))
    }
    fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check(parts)?;
        let v = Tensor::concat_rows(&parts.iter().map(|p| self.value(p)).collect::<Vec<_>>())?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, parts))
    }
    fn slice_rows(&mut self, a: &NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(&[*a])?;
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(Op::SliceRows(*a, start), v, &[*a]))
    }
    fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check(parts)?;
        let v = Tensor::concat_cols(&parts.iter().map(|p| self.value(p)).collect::<Vec<_>>())?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, parts))
    }
    fn slice_cols(&mut self, a: &NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(&[*a])?;
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(Op::SliceCols(*a, start), v, &[*a]))
    }
    fn transpose(&mut self, a: &NodeId) -> Result<NodeId> {
        self.check(&[*a])?;
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(*a), v, &[*a]))
    }
    fn sum(&mut self, a: &NodeId) -> Result<NodeId> {
        self.check(&[*a])?;
        let v = Tensor::scalar(self.value(a).sum());
        Ok(self.push(Op::Sum(*a), v, &[*a]))
    }
    fn cross_entropy(&mut self, logits: &NodeId, label: usize) -> Result<NodeId> {
        self.check(&[*logits])?;
        let (loss, probs) = cross_entropy_forward(self.value(logits), label)?;
        let op = Op::CrossEntropy {
            logits: *logits,
            label,
            probs,
        };
        Ok(self.push(op, Tensor::scalar(loss), &[*logits]))
    }
    fn mix_rows(&mut self, inputs: &[NodeId], rows: &[Vec<RowTerm>]) -> Result<NodeId> {
        self.check(inputs)?;
        let v = mix_rows_forward(&inputs.iter().map(|p| self.value(p)).collect::<Vec<_>>(), rows)?;
        let op = Op::MixRows {
            inputs: inputs.to_vec(),
            rows: rows.to_vec(),
        };
        Ok(self.push(op, v, inputs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(x) for a scalar function built
    /// on a fresh tape from a single parameter.
    fn grad_check(x: &Tensor, f: impl Fn(&mut Tape, NodeId) -> NodeId) -> f64 {
        let mut tape = Tape::new();
        let p = tape.param(x);
        let loss = f(&mut tape, p);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let eval_at = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let p = tape.param(&xp);
                let loss = f(&mut tape, p);
                tape.value(&loss).data()[0]
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2, 3]));
        let s = tape.sum(&x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv = random(&mut rng, &[3, 2]);
        let mut tape = Tape::new();
        let x = tape.param(&xv);
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq).unwrap();
        let half = tape.scale(&s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert!(g.get(x).unwrap().max_abs_diff(&xv).unwrap() < 1e-15);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 2], 2.0));
        let x = tape.param(&Tensor::full(&[2, 2], 1.0));
        let y = tape.mul(&c, &x).unwrap();
        let s = tape.sum(&y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 4]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Eval;
        let uniform = Tensor::zeros(&[1, 4]);
        let l = g.cross_entropy(&uniform, 2).unwrap();
        assert!((l.data()[0] - 4f64.ln()).abs() < 1e-12);
        let confident = Tensor::matrix(1, 3, vec![1e3, 0.0, 0.0]).unwrap();
        assert!(g.cross_entropy(&confident, 0).unwrap().data()[0] < 1e-12);
        assert!(matches!(
            g.cross_entropy(&confident, 3),
            Err(Error::LabelRange { label: 3, classes: 3 })
        ));
    }

    // Mixes every op into a scalar so one central-difference sweep covers
    // all backward rules. Shapes stay <= 6.
    fn composite<G: Graph>(t: &mut G, x: G::Var, rng_seed: u64) -> G::Var {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let w = t.constant(random(&mut rng, &[4, 4]));
        let gamma = t.constant(random(&mut rng, &[4]));
        let beta = t.constant(random(&mut rng, &[4]));
        let a = t.matmul(&x, &w).unwrap();
        let b = t.layer_norm(&a, &gamma, &beta, 1e-5).unwrap();
        let c = t.gelu(&b).unwrap();
        let d = t.softmax_rows(&c).unwrap();
        let e = t.mul(&d, &x).unwrap();
        let f = t.transpose(&e).unwrap();
        let g = t.slice_cols(&f, 1, 2).unwrap();
        let h = t.slice_rows(&x, 0, 2).unwrap();
        let hc = t.slice_cols(&x, 0, 2).unwrap();
        let i = t.concat_cols(&[g, hc]).unwrap();
        let j = t.concat_rows(&[i.clone(), i]).unwrap();
        let k = t
            .mix_rows(&[j, x.clone()], &[vec![RowTerm::new(0, 0, 0.5), RowTerm::new(0, 3, 0.5)], vec![RowTerm::new(1, 2, -1.5)]])
            .unwrap();
        let kk = t.slice_cols(&k, 0, 4).unwrap();
        let l = t.sub(&kk, &h).unwrap();
        let m = t.add(&l, &kk).unwrap();
        let sm = t.slice_rows(&m, 0, 1).unwrap();
        let ce = t.cross_entropy(&sm, 1).unwrap();
        let s = t.sum(&m).unwrap();
        let s = t.scale(&s, 0.3).unwrap();
        t.add(&ce, &s).unwrap()
    }

    #[test]
    fn every_op_passes_gradient_check_on_100_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = random(&mut rng, &[4, 4]);
            let worst = grad_check(&x, |t, p| composite(t, p, seed));
            assert!(worst < 1e-4, "seed {seed}: rel err {worst}");
        }
    }

    #[test]
    fn layer_norm_affine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[3, 5]);
        let gamma = random(&mut rng, &[5]);
        let worst = grad_check(&gamma, |t, g| {
            let xv = t.constant(x.clone());
            let b = t.param(&Tensor::zeros(&[5]));
            let y = t.layer_norm(&xv, &g, &b, 1e-5).unwrap();
            let y2 = t.mul(&y, &y).unwrap();
            t.sum(&y2).unwrap()
        });
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn eval_and_tape_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[4, 4]);
        let mut tape = Tape::new();
        let p = tape.param(&x);
        let out = composite(&mut tape, p, 3);
        let eager = composite(&mut Eval, x, 3);
        assert_eq!(tape.value(&out), &eager);
    }
}
