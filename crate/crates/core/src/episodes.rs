//! K-way N-shot episodes: sampling, running one episode end to end, and a
//! seeded harness that runs many episodes serially or on a thread pool with
//! identical results.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{Adjuster, AdjustmentConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{argmax, query_hardness};
use crate::heads::{fit_head, mixture_probs, FitConfig, HeadKind, Predictor};
use crate::knowledge::{FeatureDataset, KnowledgeBase, Labeled};
use crate::numerics::mean_vector;

/// Queries per class when nothing else is specified.
pub const DEFAULT_QUERY: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeShape {
    pub fn new(way: usize, shot: usize, query: usize) -> Self {
        EpisodeShape { way, shot, query }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::invalid(format!(
                "an episode needs at least 2 classes, got way={}",
                self.way
            )));
        }
        if self.shot == 0 || self.query == 0 {
            return Err(Error::invalid("shot and query counts must be positive"));
        }
        Ok(())
    }
}

/// One sampled task. Labels inside the episode are `0..way`; `class_map`
/// gives the dataset class behind each episode label.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub shape: EpisodeShape,
    pub support: Vec<Labeled>,
    pub query: Vec<Labeled>,
    pub class_map: Vec<usize>,
    /// `(dataset class, sample index)` of every support sample.
    pub support_ids: Vec<(usize, usize)>,
    /// `(dataset class, sample index)` of every query sample.
    pub query_ids: Vec<(usize, usize)>,
    /// Per query: drawn from a different confounder stratum than its class's
    /// support. Always false for unstratified sampling.
    pub query_shift: Vec<bool>,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, |s| s.x.len())
    }
}

/// Draws `way` classes, then `shot + query` distinct samples from each.
pub fn sample_episode<R: Rng + ?Sized>(ds: &FeatureDataset, shape: EpisodeShape, rng: &mut R) -> Result<Episode> {
    shape.validate()?;
    if ds.num_classes() < shape.way {
        return Err(Error::invalid(format!(
            "{}-way episodes need {} classes, dataset has {} (short by {})",
            shape.way,
            shape.way,
            ds.num_classes(),
            shape.way - ds.num_classes()
        )));
    }
    let per_class = shape.shot + shape.query;
    let classes = index::sample(rng, ds.num_classes(), shape.way).into_vec();
    let mut ep = Episode {
        shape,
        support: Vec::with_capacity(shape.way * shape.shot),
        query: Vec::with_capacity(shape.way * shape.query),
        class_map: classes.clone(),
        support_ids: Vec::new(),
        query_ids: Vec::new(),
        query_shift: Vec::new(),
    };
    for (label, &c) in classes.iter().enumerate() {
        let available = ds.class(c).len();
        if available < per_class {
            return Err(Error::invalid(format!(
                "class {c} has {available} samples, episode needs {per_class} (short by {})",
                per_class - available
            )));
        }
        let picks = index::sample(rng, available, per_class).into_vec();
        for (j, &i) in picks.iter().enumerate() {
            let sample = Labeled::new(ds.class(c)[i].clone(), label);
            if j < shape.shot {
                ep.support.push(sample);
                ep.support_ids.push((c, i));
            } else {
                ep.query.push(sample);
                ep.query_ids.push((c, i));
                ep.query_shift.push(false);
            }
        }
    }
    Ok(ep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub predicted: usize,
    pub truth: usize,
    pub hardness: f64,
    pub correct: bool,
    pub stratum_shift: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub queries: Vec<QueryOutcome>,
}

impl EpisodeResult {
    /// Fraction of correct queries, in `[0, 1]`.
    pub fn accuracy(&self) -> f64 {
        if self.queries.is_empty() {
            return 0.0;
        }
        self.queries.iter().filter(|q| q.correct).count() as f64 / self.queries.len() as f64
    }
}

/// How to classify within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub classifier: HeadKind,
    pub adjustment: AdjustmentConfig,
    pub fit: FitConfig,
}

/// Fits the classifier on the support set (centroid heads are built
/// directly from the adjusted support features) and scores every query.
pub fn run_episode(ep: &Episode, cfg: &EpisodeConfig, kb: &KnowledgeBase) -> Result<EpisodeResult> {
    let dim = ep.dim();
    if kb.dim() != dim {
        return Err(Error::invalid(format!(
            "knowledge base dimension {} does not match feature dimension {dim}",
            kb.dim()
        )));
    }
    let adjuster = Adjuster::new(cfg.adjustment, dim, Some(kb))?;
    let way = ep.shape.way;
    let heads = fit_head(&ep.support, &adjuster, cfg.classifier, way, &cfg.fit)?;

    // mean pre-trained logits of each class's support
    let support_logits: Vec<Vec<f64>> = (0..way)
        .map(|c| {
            let logits = ep
                .support
                .iter()
                .filter(|s| s.label == c)
                .map(|s| kb.pretrain_logits(&s.x))
                .collect::<Result<Vec<_>>>()?;
            mean_vector(&logits)
        })
        .collect::<Result<_>>()?;

    let queries = ep
        .query
        .iter()
        .zip(&ep.query_shift)
        .map(|(q, &shift)| {
            let probs = mixture_probs(&heads, &adjuster.components(&q.x)?)?;
            let predicted = argmax(&probs);
            let hardness = query_hardness(&kb.pretrain_logits(&q.x)?, &support_logits, q.label)?;
            Ok(QueryOutcome {
                predicted,
                truth: q.label,
                hardness,
                correct: predicted == q.label,
                stratum_shift: shift,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EpisodeResult { queries })
}

/// Generator for episode `index` of a run seeded with `seed`. Each index
/// gets its own ChaCha stream, so results do not depend on execution order.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs `job(i)` for `i in 0..count` on up to `threads` threads and returns
/// the results in index order. The first error by index wins.
pub fn run_indexed<T, F>(count: usize, threads: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if threads <= 1 {
        return (0..count).map(&job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start thread pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| (0..count).into_par_iter().map(&job).collect());
    results.into_iter().collect()
}

/// Samples and runs `count` episodes. `sampler` draws episode `i` from the
/// per-episode stream; the fit seed is the next draw from that stream.
pub fn evaluate<S>(
    count: usize,
    seed: u64,
    threads: usize,
    sampler: S,
    cfg: &EpisodeConfig,
    kb: &KnowledgeBase,
) -> Result<Vec<EpisodeResult>>
where
    S: Fn(&mut ChaCha8Rng) -> Result<Episode> + Sync + Send,
{
    run_indexed(count, threads, |i| {
        let mut rng = episode_rng(seed, i as u64);
        let ep = sampler(&mut rng)?;
        let cfg = EpisodeConfig {
            fit: FitConfig {
                seed: rng.random(),
                ..cfg.fit
            },
            ..*cfg
        };
        run_episode(&ep, &cfg, kb)
    })
}
