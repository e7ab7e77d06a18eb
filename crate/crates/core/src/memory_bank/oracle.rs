//! Brute-force reference for similarity-based compression on small streams.
//!
//! Deliberately shares nothing with [`MemoryBank`](super::MemoryBank): tokens
//! are nested `Vec`s, provenance is an explicit sorted list of timesteps, and
//! the cosine is recomputed here. Used by the tests and `verify` command to
//! cross-check the production path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::MemoryBank;

pub const MAX_STREAM: usize = 12;
pub const MAX_POSITIONS: usize = 4;
pub const MAX_CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Token,
    Frame,
}

/// Final state after streaming every grid through a bank of capacity `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleBank {
    /// `[entry][position][channel]`
    pub tokens: Vec<Vec<Vec<f64>>>,
    /// `[entry][position]` -> sorted timesteps (1-based)
    pub provenance: Vec<Vec<Vec<u64>>>,
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Streams `grids` (each `P x C`, timesteps `1..`) into a capacity-`m` bank,
/// reducing by one merge whenever the length exceeds `m`.
pub fn oracle_compress(grids: &[Tensor], m: usize, level: Level) -> Result<OracleBank> {
    let first = grids.first().ok_or(Error::EmptyBank)?;
    let (p, c) = (first.rows(), first.cols());
    if grids.len() > MAX_STREAM || p > MAX_POSITIONS || c > MAX_CHANNELS {
        return Err(Error::OracleSizeLimit(format!(
            "stream {} (max {MAX_STREAM}), P {p} (max {MAX_POSITIONS}), C {c} (max {MAX_CHANNELS})",
            grids.len()
        )));
    }
    if m == 0 {
        return Err(Error::Config("capacity must be >= 1".into()));
    }
    // per position: the ordered sequence of (token, provenance)
    let mut columns: Vec<Vec<(Vec<f64>, Vec<u64>)>> = vec![Vec::new(); p];
    for (t, g) in grids.iter().enumerate() {
        if g.rows() != p || g.cols() != c {
            return Err(Error::GridDimension {
                got_tokens: g.rows(),
                got_channels: g.cols(),
                want_tokens: p,
                want_channels: c,
            });
        }
        for (i, col) in columns.iter_mut().enumerate() {
            let token: Vec<f64> = (0..c).map(|ch| g.data()[i * c + ch]).collect();
            col.push((token, vec![t as u64 + 1]));
        }
        let len = columns[0].len();
        if len <= m {
            continue;
        }
        let ks: Vec<usize> = match level {
            Level::Token => columns
                .iter()
                .map(|col| {
                    let mut best = 0;
                    for t in 1..len - 1 {
                        if cos(&col[t].0, &col[t + 1].0) > cos(&col[best].0, &col[best + 1].0) {
                            best = t;
                        }
                    }
                    best
                })
                .collect(),
            Level::Frame => {
                let frame = |t: usize| -> Vec<f64> { columns.iter().flat_map(|col| col[t].0.clone()).collect() };
                let mut best = 0;
                for t in 1..len - 1 {
                    if cos(&frame(t), &frame(t + 1)) > cos(&frame(best), &frame(best + 1)) {
                        best = t;
                    }
                }
                vec![best; p]
            }
        };
        for (col, k) in columns.iter_mut().zip(ks) {
            let (b, pb) = col.remove(k + 1);
            let (a, pa) = &mut col[k];
            for (x, y) in a.iter_mut().zip(&b) {
                *x = (*x + y) / 2.0;
            }
            pa.extend(pb);
            pa.sort_unstable();
        }
    }
    let len = columns[0].len();
    let tokens = (0..len).map(|j| columns.iter().map(|col| col[j].0.clone()).collect()).collect();
    let provenance = (0..len).map(|j| columns.iter().map(|col| col[j].1.clone()).collect()).collect();
    Ok(OracleBank { tokens, provenance })
}

impl OracleBank {
    /// Largest elementwise token difference against `bank`, or `None` if
    /// the shapes or provenance disagree.
    pub fn compare(&self, bank: &MemoryBank) -> Option<f64> {
        if self.tokens.len() != bank.len() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for (j, entry) in bank.entries().iter().enumerate() {
            for (i, span) in entry.provenance().iter().enumerate() {
                let expected: Vec<u64> = span.timesteps().collect();
                if self.provenance[j].get(i) != Some(&expected) {
                    return None;
                }
                let row = entry.tokens().row(i);
                let want = &self.tokens[j][i];
                if want.len() != row.len() {
                    return None;
                }
                for (a, b) in row.iter().zip(want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        Some(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory_bank::CompressionPolicy;

    fn g(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn hand_example_matches() {
        let grids = [g(&[&[1.0, 0.0]]), g(&[&[1.0, 0.0]]), g(&[&[0.0, 1.0]])];
        let o = oracle_compress(&grids, 2, Level::Token).unwrap();
        assert_eq!(o.tokens, vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]);
        assert_eq!(o.provenance, vec![vec![vec![1, 2]], vec![vec![3]]]);
    }

    #[test]
    fn all_identical_agrees_with_bank() {
        let a = g(&[&[0.5, 0.25], &[-1.0, 2.0]]);
        let grids = vec![a; 7];
        let o = oracle_compress(&grids, 3, Level::Token).unwrap();
        let mut bank = MemoryBank::new(3, 2, 2, CompressionPolicy::MBC_TOKEN).unwrap();
        for x in &grids {
            bank.append_tokens(x.clone()).unwrap();
        }
        assert_eq!(o.compare(&bank), Some(0.0));
    }

    #[test]
    fn strictly_decreasing_similarity_has_unique_argmax() {
        // successive angles grow, so adjacent cosines strictly decrease
        let angles = [0.0f64, 0.1, 0.3, 0.6, 1.0, 1.5];
        let grids: Vec<Tensor> = angles.iter().map(|a| g(&[&[a.cos(), a.sin()]])).collect();
        let o = oracle_compress(&grids, 5, Level::Token).unwrap();
        assert_eq!(o.provenance[0], vec![vec![1, 2]]);
        let mut bank = MemoryBank::new(5, 1, 2, CompressionPolicy::MBC_TOKEN).unwrap();
        for x in &grids {
            bank.append_tokens(x.clone()).unwrap();
        }
        assert!(o.compare(&bank).unwrap() < 1e-12);
    }

    #[test]
    fn refuses_large_instances() {
        let grids = vec![Tensor::zeros(&[1, 7]); 2];
        assert!(matches!(oracle_compress(&grids, 1, Level::Token), Err(Error::OracleSizeLimit(_))));
        let grids = vec![Tensor::zeros(&[1, 2]); 13];
        assert!(matches!(oracle_compress(&grids, 1, Level::Token), Err(Error::OracleSizeLimit(_))));
    }
}
