//! Backdoor adjustment over the pre-trained knowledge.
//!
//! Three stratifications are supported:
//!
//! * **feature-wise**: strata are equal blocks of feature dimensions; each
//!   block gets its own head fed the block's active entries, and the
//!   per-block softmax outputs are averaged with a uniform prior.
//! * **class-wise**: strata are the pre-training classes; the expectation
//!   over classes is moved inside the softmax (normalized weighted geometric
//!   mean), so a single head sees `x ⊕ ĉ` with
//!   `ĉ = (1/m) Σ_j P(a_j|x) · x̄_j`.
//! * **combined**: the feature-wise split applied to `x ⊕ ĉ`.
//!
//! [`backdoor_exact_classwise`] evaluates the class-wise sum without the
//! approximation and serves as its reference.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{mixture_probs, Component, HeadParams, Predictor};
use crate::knowledge::{active_index_set, feature_partition, KnowledgeBase, PartitionConfig};
use crate::numerics::{ensure_finite, softmax_unchecked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Feature,
    Class,
    Combined,
}

impl Strategy {
    pub fn uses_knowledge(self) -> bool {
        matches!(self, Strategy::Class | Strategy::Combined)
    }

    pub fn uses_partition(self) -> bool {
        matches!(self, Strategy::Feature | Strategy::Combined)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::Feature => "feature",
            Strategy::Class => "class",
            Strategy::Combined => "combined",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(Strategy::None),
            "feature" => Ok(Strategy::Feature),
            "class" => Ok(Strategy::Class),
            "combined" => Ok(Strategy::Combined),
            other => Err(Error::invalid(format!("unknown adjustment {other:?}"))),
        }
    }
}

/// Which adjustment to apply and how to stratify feature dimensions.
/// The stratum prior is always uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentConfig {
    pub strategy: Strategy,
    pub partition: PartitionConfig,
}

impl AdjustmentConfig {
    pub fn none() -> Self {
        AdjustmentConfig {
            strategy: Strategy::None,
            partition: PartitionConfig::default(),
        }
    }

    pub fn new(strategy: Strategy, partition: PartitionConfig) -> Self {
        AdjustmentConfig { strategy, partition }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.strategy.uses_partition() {
            self.partition.validate(dim)?;
        }
        Ok(())
    }

    /// Number of heads the strategy needs.
    pub fn num_heads(&self) -> usize {
        if self.strategy.uses_partition() {
            self.partition.n
        } else {
            1
        }
    }

    /// Input dimension of each head for features of dimension `dim`.
    pub fn head_input_dim(&self, dim: usize) -> usize {
        match self.strategy {
            Strategy::None => dim,
            Strategy::Feature => dim / self.partition.n,
            Strategy::Class => 2 * dim,
            Strategy::Combined => 2 * dim / self.partition.n,
        }
    }
}

/// The mediator value for one stratum.
#[derive(Debug, Clone, PartialEq)]
pub enum StratumContext {
    /// Active feature indices inside one block (feature-wise).
    Indices(Vec<usize>),
    /// A feature-space vector (class-wise).
    Vector(Vec<f64>),
}

/// `c_i = F_i ∩ I_t(x)` for every block `F_i`.
pub fn feature_contexts(x: &[f64], partition: &PartitionConfig) -> Result<Vec<StratumContext>> {
    partition.validate(x.len())?;
    let blocks = feature_partition(x.len(), partition.n)?;
    Ok(block_contexts(x, partition.t, &blocks)
        .into_iter()
        .map(StratumContext::Indices)
        .collect())
}

fn block_contexts(x: &[f64], t: f64, blocks: &[Range<usize>]) -> Vec<Vec<usize>> {
    let active = active_index_set(x, t);
    blocks
        .iter()
        .map(|b| active.iter().copied().filter(|k| b.contains(k)).collect())
        .collect()
}

/// The `block` slice of `x` with entries outside `c` zeroed.
pub fn select(x: &[f64], c: &[usize], block: Range<usize>) -> Result<Vec<f64>> {
    if block.end > x.len() {
        return Err(Error::invalid(format!(
            "block {block:?} exceeds feature dimension {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; block.len()];
    for &k in c {
        if !block.contains(&k) {
            return Err(Error::invalid(format!("index {k} is outside block {block:?}")));
        }
        out[k - block.start] = x[k];
    }
    Ok(out)
}

fn masked_slice<'a>(x: &'a [f64], t: f64, block: &Range<usize>) -> impl Iterator<Item = f64> + 'a {
    x[block.clone()].iter().map(move |&v| if v.abs() > t { v } else { 0.0 })
}

/// `ĉ = (1/m) Σ_j P(a_j|x) · x̄_j`
pub fn class_context(kb: &KnowledgeBase, x: &[f64]) -> Result<Vec<f64>> {
    let probs = kb.pretrain_probs(x)?;
    let m = kb.m() as f64;
    let mut out = vec![0.0; kb.dim()];
    for (p, mean) in probs.iter().zip(kb.class_means()) {
        out.iter_mut().zip(mean).for_each(|(o, v)| *o += p * v);
    }
    out.iter_mut().for_each(|o| *o /= m);
    Ok(out)
}

/// Turns raw features into the per-stratum head inputs of one strategy.
#[derive(Debug, Clone)]
pub struct Adjuster<'a> {
    cfg: AdjustmentConfig,
    dim: usize,
    blocks: Vec<Range<usize>>,
    kb: Option<&'a KnowledgeBase>,
}

impl<'a> Adjuster<'a> {
    pub fn new(cfg: AdjustmentConfig, dim: usize, kb: Option<&'a KnowledgeBase>) -> Result<Self> {
        cfg.validate(dim)?;
        if cfg.strategy.uses_knowledge() {
            let kb = kb.ok_or_else(|| Error::invalid(format!("{} adjustment needs a knowledge base", cfg.strategy)))?;
            if kb.dim() != dim {
                return Err(Error::invalid(format!(
                    "knowledge base dimension {} does not match feature dimension {dim}",
                    kb.dim()
                )));
            }
        }
        let blocks = if cfg.strategy.uses_partition() {
            feature_partition(dim, cfg.partition.n)?
        } else {
            std::iter::once(0..dim).collect()
        };
        Ok(Adjuster { cfg, dim, blocks, kb })
    }

    pub fn config(&self) -> &AdjustmentConfig {
        &self.cfg
    }

    fn kb(&self) -> &KnowledgeBase {
        self.kb.expect("checked in Adjuster::new")
    }
}

impl Predictor for Adjuster<'_> {
    fn components(&self, x: &[f64]) -> Result<Vec<Component>> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "feature has dimension {}, adjuster expects {}",
                x.len(),
                self.dim
            )));
        }
        ensure_finite(x, "feature vector")?;
        let n = self.blocks.len() as f64;
        let t = self.cfg.partition.t;
        let comps = match self.cfg.strategy {
            Strategy::None => vec![Component {
                head: 0,
                input: x.to_vec(),
                weight: 1.0,
            }],
            Strategy::Feature => self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| Component {
                    head: i,
                    input: masked_slice(x, t, b).collect(),
                    weight: 1.0 / n,
                })
                .collect(),
            Strategy::Class => {
                let ctx = class_context(self.kb(), x)?;
                vec![Component {
                    head: 0,
                    input: [x, ctx.as_slice()].concat(),
                    weight: 1.0,
                }]
            }
            Strategy::Combined => {
                let ctx = class_context(self.kb(), x)?;
                self.blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| Component {
                        head: i,
                        input: masked_slice(x, t, b).chain(masked_slice(&ctx, t, b)).collect(),
                        weight: 1.0 / n,
                    })
                    .collect()
            }
        };
        Ok(comps)
    }
}

/// `P(Y | do(x))` under `cfg`, with one head per stratum.
pub fn predict(
    heads: &[HeadParams],
    x: &[f64],
    kb: Option<&KnowledgeBase>,
    cfg: &AdjustmentConfig,
) -> Result<Vec<f64>> {
    if heads.len() != cfg.num_heads() {
        return Err(Error::invalid(format!(
            "{} adjustment needs {} heads, got {}",
            cfg.strategy,
            cfg.num_heads(),
            heads.len()
        )));
    }
    let adjuster = Adjuster::new(*cfg, x.len(), kb)?;
    mixture_probs(heads, &adjuster.components(x)?)
}

/// Class-wise strata without the geometric-mean approximation: one
/// component per pre-training class `d`, input `x ⊕ P(a_d|x)·x̄_d`, prior `1/m`.
#[derive(Debug, Clone, Copy)]
pub struct ExactClasswise<'a> {
    pub kb: &'a KnowledgeBase,
}

impl Predictor for ExactClasswise<'_> {
    fn components(&self, x: &[f64]) -> Result<Vec<Component>> {
        let probs = self.kb.pretrain_probs(x)?;
        let m = self.kb.m() as f64;
        Ok(probs
            .iter()
            .zip(self.kb.class_means())
            .map(|(p, mean)| Component {
                head: 0,
                input: x.iter().copied().chain(mean.iter().map(|v| p * v)).collect(),
                weight: 1.0 / m,
            })
            .collect())
    }
}

/// `Σ_d softmax(f(x ⊕ c_d)) · P(d)` over all pre-training classes.
pub fn backdoor_exact_classwise(head: &HeadParams, x: &[f64], kb: &KnowledgeBase) -> Result<Vec<f64>> {
    if head.input_dim() != 2 * kb.dim() {
        return Err(Error::invalid(format!(
            "head input dimension {} is not twice the feature dimension {}",
            head.input_dim(),
            kb.dim()
        )));
    }
    mixture_probs(std::slice::from_ref(head), &ExactClasswise { kb }.components(x)?)
}

/// Normalized weighted geometric mean of the softmax outputs of several
/// logit vectors: `Π_d exp(f_y,d)^{P(d)}` normalized over classes.
pub fn nwgm(logit_sets: &[Vec<f64>], priors: &[f64]) -> Result<Vec<f64>> {
    let first = logit_sets
        .first()
        .ok_or_else(|| Error::invalid("nwgm of no logit sets"))?;
    let k = first.len();
    if k == 0 {
        return Err(Error::invalid("empty logit vector"));
    }
    if priors.len() != logit_sets.len() {
        return Err(Error::invalid(format!(
            "{} priors for {} logit sets",
            priors.len(),
            logit_sets.len()
        )));
    }
    if priors.iter().any(|p| p.is_nan() || *p < 0.0) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("priors must be non-negative and sum to 1"));
    }
    for set in logit_sets {
        if set.len() != k {
            return Err(Error::invalid("logit sets have different lengths"));
        }
        ensure_finite(set, "logits")?;
    }
    // exp(f − max_d) per set; the max factors out of the normalization
    let mut out = vec![1.0; k];
    for (set, &prior) in logit_sets.iter().zip(priors) {
        let max = set.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (o, f) in out.iter_mut().zip(set) {
            *o *= (f - max).exp().powf(prior);
        }
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 && total.is_finite() {
        out.iter_mut().for_each(|o| *o /= total);
        Ok(out)
    } else {
        // every product underflowed; fall back to the log-space form
        let mean: Vec<f64> = (0..k)
            .map(|y| logit_sets.iter().zip(priors).map(|(s, p)| s[y] * p).sum())
            .collect();
        Ok(softmax_unchecked(&mean))
    }
}
