//! Report files: a JSON summary per command and an optional per-query CSV.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use ifsl_core::{EpisodeResult, HardnessBin};
use serde::Serialize;
use serde_json::{Map, Value};

/// Fields excluded from determinism checks.
#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub duration_s: f64,
    pub version: &'static str,
}

impl RunMeta {
    pub fn since(start: Instant) -> Self {
        RunMeta {
            duration_s: start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize> {
    pub config: &'a C,
    pub mean_acc: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub hardness_bins: Vec<HardnessBin>,
    /// Command-specific sections (comparison arms, differences).
    #[serde(flatten)]
    pub extra: Map<String, Value>,
    pub meta: RunMeta,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
struct QueryRow {
    episode: usize,
    query: usize,
    truth: usize,
    predicted: usize,
    correct: bool,
    hardness: f64,
    stratum_shift: bool,
}

/// One row per query, in episode order.
pub fn write_query_csv(path: &Path, results: &[EpisodeResult]) -> Result<()> {
    let mut out = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for (episode, r) in results.iter().enumerate() {
        for (query, q) in r.queries.iter().enumerate() {
            out.serialize(QueryRow {
                episode,
                query,
                truth: q.truth,
                predicted: q.predicted,
                correct: q.correct,
                hardness: q.hardness,
                stratum_shift: q.stratum_shift,
            })?;
        }
    }
    out.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
