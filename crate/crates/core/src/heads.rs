//! Classifier heads over (possibly adjusted) feature vectors, their exact
//! cross-entropy gradients, and the SGD fine-tuning loop.
//!
//! Every prediction in this crate is a *mixture*: a list of [`Component`]s,
//! each feeding one input vector to one head, whose softmax outputs are
//! averaged with the component weights. The unadjusted classifier is the
//! one-component case; the backdoor adjustments in [`crate::adjust`] produce
//! one component per stratum.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::Labeled;
use crate::numerics::{dot, mean_vector, norm, softmax_unchecked, squared_distance, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `W·z + b`
    Linear,
    /// Row-normalized `W·z / (‖w_i‖‖z‖)`, no bias.
    Cosine,
    /// `−‖z − centroid_i‖²`
    Centroid,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::Cosine => "cosine",
            HeadKind::Centroid => "centroid",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "cosine" => Ok(HeadKind::Cosine),
            "centroid" | "knn" => Ok(HeadKind::Centroid),
            other => Err(Error::invalid(format!("unknown classifier {other:?}"))),
        }
    }
}

/// Parameters of one classifier head. For centroid heads the weight rows
/// hold the centroids and the bias is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    kind: HeadKind,
    weights: Matrix,
    bias: Vec<f64>,
}

impl HeadParams {
    fn checked(kind: HeadKind, weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::invalid(format!(
                "a head needs at least 2 classes, got {}",
                weights.rows()
            )));
        }
        if weights.cols() == 0 {
            return Err(Error::invalid("head input dimension must be positive"));
        }
        if bias.len() != weights.rows() {
            return Err(Error::invalid(format!(
                "bias has {} entries for {} classes",
                bias.len(),
                weights.rows()
            )));
        }
        crate::numerics::ensure_finite(&bias, "bias")?;
        Ok(HeadParams { kind, weights, bias })
    }

    pub fn linear(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        Self::checked(HeadKind::Linear, weights, bias)
    }

    pub fn linear_zeros(classes: usize, input_dim: usize) -> Result<Self> {
        Self::linear(Matrix::zeros(classes, input_dim), vec![0.0; classes])
    }

    pub fn cosine(weights: Matrix) -> Result<Self> {
        let k = weights.rows();
        Self::checked(HeadKind::Cosine, weights, vec![0.0; k])
    }

    pub fn centroid(centroids: &[Vec<f64>]) -> Result<Self> {
        let k = centroids.len();
        Self::checked(HeadKind::Centroid, Matrix::from_rows(centroids)?, vec![0.0; k])
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "head expects input dimension {}, got {}",
                self.input_dim(),
                z.len()
            )));
        }
        Ok(self.logits_unchecked(z))
    }

    fn logits_unchecked(&self, z: &[f64]) -> Vec<f64> {
        match self.kind {
            HeadKind::Linear => self
                .weights
                .iter_rows()
                .zip(&self.bias)
                .map(|(w, b)| dot(w, z) + b)
                .collect(),
            HeadKind::Cosine => {
                let zn = norm(z);
                self.weights
                    .iter_rows()
                    .map(|w| {
                        let denom = norm(w) * zn;
                        if denom == 0.0 {
                            0.0
                        } else {
                            dot(w, z) / denom
                        }
                    })
                    .collect()
            }
            HeadKind::Centroid => self.weights.iter_rows().map(|c| -squared_distance(z, c)).collect(),
        }
    }

    pub fn probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax_unchecked(&self.logits(z)?))
    }

    /// Accumulates `∂(dlogits · logits)/∂params` into `grad`.
    fn backprop(&self, z: &[f64], dlogits: &[f64], grad: &mut HeadGrad) {
        match self.kind {
            HeadKind::Linear => {
                for (i, &g) in dlogits.iter().enumerate() {
                    grad.bias[i] += g;
                    grad.weights
                        .row_mut(i)
                        .iter_mut()
                        .zip(z)
                        .for_each(|(w, zk)| *w += g * zk);
                }
            }
            HeadKind::Cosine => {
                let zn = norm(z);
                if zn == 0.0 {
                    return;
                }
                for (i, &g) in dlogits.iter().enumerate() {
                    let w = self.weights.row(i);
                    let wn = norm(w);
                    if wn == 0.0 {
                        continue;
                    }
                    let cos = dot(w, z) / (wn * zn);
                    // d cos / d w = z / (‖w‖‖z‖) − cos · w / ‖w‖²
                    grad.weights
                        .row_mut(i)
                        .iter_mut()
                        .zip(w.iter().zip(z))
                        .for_each(|(gw, (wk, zk))| *gw += g * (zk / (wn * zn) - cos * wk / (wn * wn)));
                }
            }
            HeadKind::Centroid => {
                for (i, &g) in dlogits.iter().enumerate() {
                    let c = self.weights.row(i);
                    grad.weights
                        .row_mut(i)
                        .iter_mut()
                        .zip(c.iter().zip(z))
                        .for_each(|(gw, (ck, zk))| *gw += g * 2.0 * (zk - ck));
                }
            }
        }
    }

    pub(crate) fn apply(&mut self, grad: &HeadGrad, lr: f64) {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .zip(grad.weights.as_slice())
            .for_each(|(w, g)| *w -= lr * g);
        if self.kind == HeadKind::Linear {
            self.bias.iter_mut().zip(&grad.bias).for_each(|(b, g)| *b -= lr * g);
        }
    }
}

fn require_kind(h: &HeadParams, kind: HeadKind) -> Result<()> {
    if h.kind != kind {
        return Err(Error::invalid(format!("expected a {kind} head, got {}", h.kind)));
    }
    Ok(())
}

pub fn linear_logits(h: &HeadParams, z: &[f64]) -> Result<Vec<f64>> {
    require_kind(h, HeadKind::Linear)?;
    h.logits(z)
}

pub fn cosine_logits(h: &HeadParams, z: &[f64]) -> Result<Vec<f64>> {
    require_kind(h, HeadKind::Cosine)?;
    h.logits(z)
}

pub fn centroid_logits(h: &HeadParams, z: &[f64]) -> Result<Vec<f64>> {
    require_kind(h, HeadKind::Centroid)?;
    h.logits(z)
}

/// Gradient with the same shape as [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros_like(h: &HeadParams) -> Self {
        HeadGrad {
            weights: Matrix::zeros(h.num_classes(), h.input_dim()),
            bias: vec![0.0; h.num_classes()],
        }
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.weights.as_mut_slice().iter_mut().for_each(|g| *g *= s);
        self.bias.iter_mut().for_each(|g| *g *= s);
    }

    pub(crate) fn add(&mut self, other: &HeadGrad) {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .zip(other.weights.as_slice())
            .for_each(|(a, b)| *a += b);
        self.bias.iter_mut().zip(&other.bias).for_each(|(a, b)| *a += b);
    }

    pub fn norm(&self) -> f64 {
        (self.weights.norm_sq() + dot(&self.bias, &self.bias)).sqrt()
    }
}

/// One stratum's contribution to a prediction: `weight · softmax(heads[head](input))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub head: usize,
    pub input: Vec<f64>,
    pub weight: f64,
}

/// Maps a raw feature to the mixture components that produce its class
/// probabilities. Components never depend on head parameters, so they can be
/// computed once per sample.
pub trait Predictor: Sync {
    fn components(&self, x: &[f64]) -> Result<Vec<Component>>;
}

/// No adjustment: one head on the raw feature.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unadjusted;

impl Predictor for Unadjusted {
    fn components(&self, x: &[f64]) -> Result<Vec<Component>> {
        Ok(vec![Component {
            head: 0,
            input: x.to_vec(),
            weight: 1.0,
        }])
    }
}

fn check_components(heads: &[HeadParams], comps: &[Component]) -> Result<usize> {
    let k = heads.first().ok_or_else(|| Error::invalid("no heads"))?.num_classes();
    if comps.is_empty() {
        return Err(Error::invalid("prediction has no components"));
    }
    for c in comps {
        let h = heads
            .get(c.head)
            .ok_or_else(|| Error::invalid(format!("component refers to head {} of {}", c.head, heads.len())))?;
        if h.num_classes() != k {
            return Err(Error::invalid("heads disagree on the number of classes"));
        }
        if h.input_dim() != c.input.len() {
            return Err(Error::invalid(format!(
                "head {} expects input dimension {}, component has {}",
                c.head,
                h.input_dim(),
                c.input.len()
            )));
        }
    }
    Ok(k)
}

/// `Σ_k weight_k · softmax(head_k(input_k))`, summed in component order.
pub fn mixture_probs(heads: &[HeadParams], comps: &[Component]) -> Result<Vec<f64>> {
    let k = check_components(heads, comps)?;
    let mut out = vec![0.0; k];
    for c in comps {
        let p = softmax_unchecked(&heads[c.head].logits_unchecked(&c.input));
        out.iter_mut().zip(&p).for_each(|(o, pi)| *o += c.weight * pi);
    }
    Ok(out)
}

/// `−log P(y)` of the mixture plus `(wd/2)·Σ‖W‖²`, with exact gradients for
/// every head.
pub fn mixture_loss_and_grad(
    heads: &[HeadParams],
    comps: &[Component],
    y: usize,
    weight_decay: f64,
) -> Result<(f64, Vec<HeadGrad>)> {
    let k = check_components(heads, comps)?;
    if y >= k {
        return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
    }
    let per_comp: Vec<Vec<f64>> = comps
        .iter()
        .map(|c| softmax_unchecked(&heads[c.head].logits_unchecked(&c.input)))
        .collect();
    let p_y: f64 = comps
        .iter()
        .zip(&per_comp)
        .map(|(c, p)| c.weight * p[y])
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);

    let mut grads: Vec<HeadGrad> = heads.iter().map(HeadGrad::zeros_like).collect();
    let mut dlogits = vec![0.0; k];
    for (c, p) in comps.iter().zip(&per_comp) {
        // d(−log P_y)/d logits_c = (w_c p_c[y] / P_y) · (p_c − e_y)
        let resp = c.weight * p[y] / p_y;
        for (i, d) in dlogits.iter_mut().enumerate() {
            *d = resp * (p[i] - if i == y { 1.0 } else { 0.0 });
        }
        heads[c.head].backprop(&c.input, &dlogits, &mut grads[c.head]);
    }

    let mut loss = -p_y.ln();
    if weight_decay != 0.0 {
        for (h, g) in heads.iter().zip(grads.iter_mut()) {
            loss += 0.5 * weight_decay * h.weights.norm_sq();
            g.weights
                .as_mut_slice()
                .iter_mut()
                .zip(h.weights.as_slice())
                .for_each(|(gw, w)| *gw += weight_decay * w);
        }
    }
    Ok((loss, grads))
}

/// Cross-entropy of a single head on a single input.
pub fn ce_loss_and_grad(h: &HeadParams, z: &[f64], y: usize, weight_decay: f64) -> Result<(f64, HeadGrad)> {
    let comps = [Component {
        head: 0,
        input: z.to_vec(),
        weight: 1.0,
    }];
    let (loss, mut grads) = mixture_loss_and_grad(std::slice::from_ref(h), &comps, y, weight_decay)?;
    Ok((loss, grads.pop().unwrap()))
}

/// SGD settings for fine-tuning a head on a support set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    /// Samples per step. A batch at least as large as the support set means
    /// full-batch gradient descent.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 100,
            batch_size: 4,
            learning_rate: 1e-2,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

impl FitConfig {
    /// Defaults for a fit through a backdoor adjustment (halved learning rate).
    pub fn adjusted() -> Self {
        FitConfig {
            learning_rate: 5e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// A support sample with its mixture components already computed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub components: Vec<Component>,
    pub label: usize,
}

pub fn prepare(samples: &[Labeled], predictor: &dyn Predictor) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                components: predictor.components(&s.x)?,
                label: s.label,
            })
        })
        .collect()
}

/// Per-class mean of the support features.
pub fn centroids_from_support(support: &[Labeled], classes: usize) -> Result<Vec<Vec<f64>>> {
    (0..classes)
        .map(|c| {
            let members: Vec<&[f64]> = support
                .iter()
                .filter(|s| s.label == c)
                .map(|s| s.x.as_slice())
                .collect();
            if members.is_empty() {
                return Err(Error::invalid(format!("class {c} is missing from the support set")));
            }
            mean_vector(&members)
        })
        .collect()
}

/// Per head, per class centroids of the component inputs.
fn component_centroids(support: &[Prepared], classes: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let first = support.first().ok_or_else(|| Error::invalid("empty support set"))?;
    let n_heads = first.components.iter().map(|c| c.head + 1).max().unwrap_or(0);
    (0..n_heads)
        .map(|h| {
            let per_head: Vec<Labeled> = support
                .iter()
                .flat_map(|s| {
                    s.components
                        .iter()
                        .filter(move |c| c.head == h)
                        .map(move |c| Labeled::new(c.input.clone(), s.label))
                })
                .collect();
            centroids_from_support(&per_head, classes)
        })
        .collect()
}

/// Starting parameters for each head the support's components refer to:
/// zeros for linear heads, unit-normalized class centroids for cosine heads,
/// plain class centroids for centroid heads.
pub fn initial_heads(kind: HeadKind, support: &[Prepared], classes: usize) -> Result<Vec<HeadParams>> {
    if let Some(bad) = support.iter().find(|s| s.label >= classes) {
        return Err(Error::invalid(format!(
            "label {} out of range for {classes} classes",
            bad.label
        )));
    }
    let centroids = component_centroids(support, classes)?;
    centroids
        .into_iter()
        .map(|rows| match kind {
            HeadKind::Linear => HeadParams::linear_zeros(classes, rows[0].len()),
            HeadKind::Centroid => HeadParams::centroid(&rows),
            HeadKind::Cosine => {
                let dim = rows[0].len();
                let unit: Vec<Vec<f64>> = rows
                    .into_iter()
                    .enumerate()
                    .map(|(c, r)| {
                        let n = norm(&r);
                        if n > 0.0 {
                            r.iter().map(|v| v / n).collect()
                        } else {
                            // zero centroid: fall back to a basis direction
                            let mut e = vec![0.0; dim];
                            e[c % dim] = 1.0;
                            e
                        }
                    })
                    .collect();
                HeadParams::cosine(Matrix::from_rows(&unit)?)
            }
        })
        .collect()
}

/// Result of [`fine_tune`]: final heads and the batch loss seen at each step.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub heads: Vec<HeadParams>,
    pub losses: Vec<f64>,
}

/// Plain SGD from `init`. Batches are consumed from a seeded shuffle of the
/// support indices, reshuffled whenever it runs out.
pub fn fine_tune(init: Vec<HeadParams>, support: &[Prepared], cfg: &FitConfig) -> Result<Fitted> {
    cfg.validate()?;
    if support.is_empty() {
        return Err(Error::invalid("empty support set"));
    }
    let mut heads = init;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let full_batch = cfg.batch_size >= support.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..support.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(cfg.batch_size.min(support.len()));

    for _ in 0..cfg.iterations {
        batch.clear();
        if full_batch {
            batch.extend(0..support.len());
        } else {
            while batch.len() < cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
        }

        let mut total: Vec<HeadGrad> = heads.iter().map(HeadGrad::zeros_like).collect();
        let mut loss = 0.0;
        for &i in &batch {
            let s = &support[i];
            let (l, g) = mixture_loss_and_grad(&heads, &s.components, s.label, cfg.weight_decay)?;
            loss += l;
            total.iter_mut().zip(&g).for_each(|(t, gi)| t.add(gi));
        }
        let inv = 1.0 / batch.len() as f64;
        losses.push(loss * inv);
        for (h, g) in heads.iter_mut().zip(total.iter_mut()) {
            g.scale(inv);
            h.apply(g, cfg.learning_rate);
        }
    }
    Ok(Fitted { heads, losses })
}

/// Fine-tunes freshly initialized heads of `kind` on `support`, predicting
/// through `predictor`. Centroid heads are returned as initialized.
pub fn fit_head(
    support: &[Labeled],
    predictor: &dyn Predictor,
    kind: HeadKind,
    classes: usize,
    cfg: &FitConfig,
) -> Result<Vec<HeadParams>> {
    if support.is_empty() {
        return Err(Error::invalid("empty support set"));
    }
    let prepared = prepare(support, predictor)?;
    let init = initial_heads(kind, &prepared, classes)?;
    if kind == HeadKind::Centroid {
        return Ok(init);
    }
    Ok(fine_tune(init, &prepared, cfg)?.heads)
}
