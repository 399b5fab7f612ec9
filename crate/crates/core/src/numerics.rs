//! Dense kernels shared by the rest of the crate.
//!
//! Vectors are plain `f64` slices; [`Matrix`] is a row-major dense matrix.
//! Constructors reject non-finite entries so downstream code can assume
//! finiteness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        ensure_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged matrix rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl DoubleEndedIterator<Item = &[f64]> + ExactSizeIterator {
        // chunks_exact(0) panics; a 0-column matrix has no meaningful rows to hand out
        self.data.chunks_exact(self.cols.max(1))
    }

    /// `self · v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::invalid(format!(
                "matrix has {} columns, vector has {} entries",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(format!(
            "{what} has non-finite entry {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    ensure_finite(logits, "logits")?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Cosine similarity; zero when either argument has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine similarity of vectors with dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return Ok(0.0);
    }
    // rounding can push |cos| a hair past 1
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// Elementwise arithmetic mean of equally sized vectors.
pub fn mean_vector<V: AsRef<[f64]>>(vs: &[V]) -> Result<Vec<f64>> {
    let first = vs
        .first()
        .ok_or_else(|| Error::invalid("mean of an empty set of vectors"))?;
    let dim = first.as_ref().len();
    let mut acc = vec![0.0; dim];
    for v in vs {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::invalid(format!(
                "mean over vectors of dimension {dim} and {}",
                v.len()
            )));
        }
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    let count = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    Ok(acc)
}
