//! Dense row-major `f64` tensors and the forward kernels shared by the
//! eager evaluator and the tape.
//!
//! Every live tensor is counted in a thread-local ledger of resident floats
//! (see [`resident`]), which is how the benchmarks report peak memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thread-local accounting of floats held by live [`Tensor`]s.
pub mod resident {
    use std::cell::Cell;

    thread_local! {
        static LIVE: Cell<usize> = const { Cell::new(0) };
        static PEAK: Cell<usize> = const { Cell::new(0) };
    }

    pub(super) fn alloc(n: usize) {
        LIVE.with(|live| {
            let now = live.get() + n;
            live.set(now);
            PEAK.with(|peak| {
                if now > peak.get() {
                    peak.set(now);
                }
            });
        });
    }

    pub(super) fn free(n: usize) {
        LIVE.with(|live| live.set(live.get().saturating_sub(n)));
    }

    /// Floats currently held by tensors on this thread.
    pub fn live() -> usize {
        LIVE.with(Cell::get)
    }

    /// High-water mark since the last [`reset_peak`].
    pub fn peak() -> usize {
        PEAK.with(Cell::get)
    }

    /// Reset the high-water mark to the current live count.
    pub fn reset_peak() {
        let now = live();
        PEAK.with(|peak| peak.set(now));
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;
    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor::new(r.shape, r.data)
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr {
            shape: t.shape.clone(),
            data: t.data.clone(),
        }
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::raw(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        resident::free(self.data.len());
    }
}

impl Tensor {
    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        resident::alloc(data.len());
        Tensor { shape, data }
    }

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "all dimensions must be >= 1".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor::raw(shape, data))
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidShape {
                shape: vec![r, c],
                reason: "ragged rows".into(),
            });
        }
        Tensor::matrix(r, c, rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::raw(vec![1], vec![x])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension for matrices; the flattened prefix for higher ranks.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} needs a matrix"),
            }),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    fn zip_with(&self, op: &'static str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, other)?;
        Ok(Tensor::raw(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::raw(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::raw(vec![c, r], out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("mul", other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.require_matrix("softmax_rows")?;
        if !self.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = self.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(out)
    }

    /// Row-wise layer normalisation over the last dimension. Returns the
    /// output together with the normalised input and per-row inverse
    /// standard deviation, which the tape keeps for the backward pass.
    pub fn layer_norm_parts(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let c = self.cols();
        if gamma.shape() != [c] {
            return Err(Error::shape("layer_norm gamma", &self.shape, gamma.shape()));
        }
        if beta.shape() != [c] {
            return Err(Error::shape("layer_norm beta", &self.shape, beta.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let mut xhat = self.clone();
        let mut out = self.clone();
        let mut inv_std = Vec::with_capacity(self.rows());
        for r in 0..self.rows() {
            let row = self.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let xr = xhat.row_mut(r);
            for (h, &x) in xr.iter_mut().zip(row) {
                *h = (x - mean) * inv;
            }
            let hr = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = hr[j] * gamma.data[j] + beta.data[j];
            }
        }
        Ok((out, xhat, inv_std))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.layer_norm_parts(gamma, beta, eps).map(|(out, _, _)| out)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat_rows of nothing".into(),
        })?;
        let c = first.cols();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            p.require_matrix("concat_rows")?;
            if p.cols() != c {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / c;
        Ok(Tensor::raw(vec![rows, c], data))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.require_matrix("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("row slice {start}..{} out of range", start + len),
            });
        }
        Ok(Tensor::raw(vec![len, c], self.data[start * c..(start + len) * c].to_vec()))
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat_cols of nothing".into(),
        })?;
        let r = first.rows();
        for p in parts {
            p.require_matrix("concat_cols")?;
            if p.rows() != r {
                return Err(Error::shape("concat_cols", first.shape(), p.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor::raw(vec![r, total], data))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.require_matrix("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("column slice {start}..{} out of range", start + len),
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Tensor::raw(vec![r, len], data))
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Cosine similarity with a 1e-12 norm guard: vectors with (near-)zero
/// norm have similarity 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    const NORM_EPS: f64 = 1e-12;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < NORM_EPS || nb < NORM_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}
