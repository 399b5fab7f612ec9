//! Episode accuracy with 95% confidence intervals, and accuracy stratified
//! by query hardness.

use serde::{Deserialize, Serialize};

use crate::episodes::{EpisodeResult, QueryOutcome};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, relu};

/// Clamp for the similarity softmax before taking the log-odds.
const S_EPS: f64 = 1e-12;

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Log-odds that a query is *not* matched to its own class's support, from
/// the pre-trained logits of the query (`r`) and the mean pre-trained logits
/// of each class's support samples (`p`):
/// `s = softmax_c ⟨r⁺, p_c⁺⟩ [gt]`, `h = log((1 − s)/s)`.
pub fn query_hardness(r: &[f64], p: &[Vec<f64>], gt: usize) -> Result<f64> {
    if gt >= p.len() {
        return Err(Error::invalid(format!(
            "ground truth {gt} out of range for {} classes",
            p.len()
        )));
    }
    let r_pos = relu(r);
    let sims = p
        .iter()
        .map(|pc| cosine_similarity(&r_pos, &relu(pc)))
        .collect::<Result<Vec<_>>>()?;
    // similarities are in [−1, 1], so exp cannot overflow
    let total: f64 = sims.iter().map(|s| s.exp()).sum();
    let s = (sims[gt].exp() / total).clamp(S_EPS, 1.0 - S_EPS);
    Ok(((1.0 - s) / s).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Percent.
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub episodes: usize,
    /// Percent.
    pub mean_acc: f64,
    /// Half-width of the 95% interval, percent.
    pub ci95: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardness_bins: Option<Vec<HardnessBin>>,
}

/// Mean and 95% half-width (`1.96·sd/√T`, sample sd) of per-episode values.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("no values"));
    }
    let t = values.len() as f64;
    let mean = values.iter().sum::<f64>() / t;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (t - 1.0);
    Ok((mean, 1.96 * var.sqrt() / t.sqrt()))
}

pub fn accuracy_report(results: &[EpisodeResult]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::invalid("accuracy report over zero episodes"));
    }
    let per_episode: Vec<f64> = results.iter().map(|r| 100.0 * r.accuracy()).collect();
    let (mean_acc, ci95) = mean_ci95(&per_episode)?;
    Ok(Report {
        episodes: results.len(),
        mean_acc,
        ci95,
        hardness_bins: None,
    })
}

/// Pools all queries, sorts them by hardness and splits them into `bins`
/// equal-count groups (the first `total % bins` groups take one extra).
pub fn hardness_report(results: &[EpisodeResult], bins: usize) -> Result<Vec<HardnessBin>> {
    if bins < 1 {
        return Err(Error::invalid("hardness report needs at least one bin"));
    }
    let mut queries: Vec<&QueryOutcome> = results.iter().flat_map(|r| &r.queries).collect();
    if queries.len() < bins {
        return Err(Error::invalid(format!(
            "{} queries cannot fill {bins} hardness bins",
            queries.len()
        )));
    }
    queries.sort_by(|a, b| a.hardness.total_cmp(&b.hardness));
    let base = queries.len() / bins;
    let extra = queries.len() % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let len = base + usize::from(b < extra);
        let members = &queries[start..start + len];
        let correct = members.iter().filter(|q| q.correct).count();
        out.push(HardnessBin {
            lo: members[0].hardness,
            hi: members[len - 1].hardness,
            count: len,
            acc: 100.0 * correct as f64 / len as f64,
        });
        start += len;
    }
    Ok(out)
}
