//! Report plumbing. CSV rows are plain structs whose field order is the
//! column order, so schemas only change when a struct does. Reports are
//! append-only: an existing CSV gains rows (its header must match), and
//! JSON reports are appended as one object per line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{BenchError, Result};

/// One invocation's output: the exact configuration, then the rows.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport<R> {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub rows: Vec<R>,
}

impl<R: Serialize> RunReport<R> {
    pub fn new(command: &str, config: &impl Serialize, seed: u64, rows: Vec<R>) -> Result<Self> {
        Ok(RunReport {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            rows,
        })
    }
}

/// Header plus rows as CSV text.
pub fn csv_string<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `rows` to `path`, creating it with a header or appending to a
/// file whose header matches.
pub fn append_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let text = csv_string(rows)?;
    let (header, body) = text.split_once('\n').unwrap_or((&text, ""));
    let existing = std::fs::read_to_string(path).unwrap_or_default();
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if existing.is_empty() {
        file.write_all(text.as_bytes())?;
    } else {
        let have = existing.lines().next().unwrap_or_default();
        if have != header {
            return Err(BenchError::Report {
                path: path.display().to_string(),
                reason: format!("existing header `{have}` differs from `{header}`"),
            });
        }
        if !existing.ends_with('\n') {
            file.write_all(b"\n")?;
        }
        file.write_all(body.as_bytes())?;
    }
    Ok(())
}

/// Appends `value` as one JSON line.
pub fn append_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    Ok(())
}

/// Median of `xs` (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Ordinary least squares `y = slope * x + intercept`, with R².
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    LinearFit {
        slope,
        intercept,
        r_squared,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        b: u32,
        a: f64,
    }

    #[test]
    fn columns_follow_field_order_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        append_csv(&path, &[Row { b: 1, a: 0.5 }]).unwrap();
        append_csv(&path, &[Row { b: 2, a: 1.5 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "b,a\n1,0.5\n2,1.5\n");
        std::fs::write(&path, "x,y\n").unwrap();
        assert!(append_csv(&path, &[Row { b: 2, a: 1.5 }]).is_err());
    }

    #[test]
    fn fit_of_exact_line() {
        let fit = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((fit.slope - 2.0).abs() < 1e-12 && (fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
