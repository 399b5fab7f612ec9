//! The pre-trained knowledge: class means, the pre-trained classifier and
//! the feature-dimension strata, plus the labeled feature datasets that
//! stand in for backbone outputs.

pub(crate) mod format;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use format::{
    load_features, load_kb, read_features, read_features_csv, read_kb, store_features, store_kb, write_features,
    write_kb, FEATURE_MAGIC, KB_MAGIC,
};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, softmax_unchecked, Matrix};

/// Default activation threshold for the feature-wise strata.
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// A feature vector with its 0-based class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub x: Vec<f64>,
    pub label: usize,
}

impl Labeled {
    pub fn new(x: Vec<f64>, label: usize) -> Self {
        Labeled { x, label }
    }
}

/// Labeled feature vectors grouped by class. Labels are `0..num_classes()`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    classes: Vec<Vec<Vec<f64>>>,
}

impl FeatureDataset {
    pub fn new(dim: usize, classes: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        for (c, samples) in classes.iter().enumerate() {
            if samples.is_empty() {
                return Err(Error::invalid(format!("class {c} has no samples")));
            }
            for s in samples {
                if s.len() != dim {
                    return Err(Error::invalid(format!(
                        "class {c} has a sample of dimension {} (expected {dim})",
                        s.len()
                    )));
                }
                ensure_finite(s, "feature vector")?;
            }
        }
        Ok(FeatureDataset { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> &[Vec<f64>] {
        &self.classes[c]
    }

    pub fn classes(&self) -> &[Vec<Vec<f64>>] {
        &self.classes
    }

    pub fn num_samples(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// All samples in class-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(c, s)| s.iter().map(move |x| (c, x.as_slice())))
    }

    pub fn to_labeled(&self) -> Vec<Labeled> {
        self.iter().map(|(c, x)| Labeled::new(x.to_vec(), c)).collect()
    }
}

/// The confounder: per-class mean features of the pre-training data and the
/// pre-trained `m`-way linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    dim: usize,
    class_means: Vec<Vec<f64>>,
    pre_weights: Matrix,
    pre_bias: Vec<f64>,
}

impl KnowledgeBase {
    pub fn new(class_means: Vec<Vec<f64>>, pre_weights: Matrix, pre_bias: Vec<f64>) -> Result<Self> {
        let m = class_means.len();
        if m == 0 {
            return Err(Error::invalid("knowledge base needs at least one class"));
        }
        let dim = class_means[0].len();
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        for (i, mean) in class_means.iter().enumerate() {
            if mean.len() != dim {
                return Err(Error::invalid(format!(
                    "class mean {i} has dimension {} (expected {dim})",
                    mean.len()
                )));
            }
            ensure_finite(mean, "class mean")?;
        }
        if pre_weights.rows() != m || pre_weights.cols() != dim {
            return Err(Error::invalid(format!(
                "pre-trained weights are {}x{} (expected {m}x{dim})",
                pre_weights.rows(),
                pre_weights.cols()
            )));
        }
        if pre_bias.len() != m {
            return Err(Error::invalid(format!(
                "pre-trained bias has {} entries (expected {m})",
                pre_bias.len()
            )));
        }
        ensure_finite(pre_weights.as_slice(), "pre-trained weights")?;
        ensure_finite(&pre_bias, "pre-trained bias")?;
        Ok(KnowledgeBase {
            dim,
            class_means,
            pre_weights,
            pre_bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of pre-training classes.
    pub fn m(&self) -> usize {
        self.class_means.len()
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn pre_weights(&self) -> &Matrix {
        &self.pre_weights
    }

    pub fn pre_bias(&self) -> &[f64] {
        &self.pre_bias
    }

    /// Logits of the pre-trained classifier, `W·x + b`.
    pub fn pretrain_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "feature has dimension {} but the knowledge base expects {}",
                x.len(),
                self.dim
            )));
        }
        let mut logits = self.pre_weights.matvec(x)?;
        logits.iter_mut().zip(&self.pre_bias).for_each(|(l, b)| *l += b);
        Ok(logits)
    }

    /// `P(a_i | x)` for every pre-training class.
    pub fn pretrain_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_finite(x, "feature vector")?;
        Ok(softmax_unchecked(&self.pretrain_logits(x)?))
    }
}

/// How the feature dimensions are cut into strata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub n: usize,
    pub t: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            n: 8,
            t: DEFAULT_THRESHOLD,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("stratum count n must be at least 1"));
        }
        if !dim.is_multiple_of(self.n) {
            return Err(Error::invalid(format!(
                "stratum count n={} does not divide feature dimension {dim}",
                self.n
            )));
        }
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(Error::invalid(format!(
                "activation threshold must be finite and non-negative, got {}",
                self.t
            )));
        }
        Ok(())
    }
}

/// Splits `0..dim` into `n` contiguous equal-size blocks (0-based, half open).
pub fn feature_partition(dim: usize, n: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 || dim == 0 || !dim.is_multiple_of(n) {
        return Err(Error::invalid(format!(
            "stratum count n={n} does not divide feature dimension {dim}"
        )));
    }
    let size = dim / n;
    Ok((0..n).map(|i| i * size..(i + 1) * size).collect())
}

/// Indices (0-based, ascending) whose absolute value exceeds `t`.
pub fn active_index_set(x: &[f64], t: f64) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > t)
        .map(|(k, _)| k)
        .collect()
}
