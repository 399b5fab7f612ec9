//! First-order learned initialization of the classifier heads: each task
//! adapts a copy of `θ₀` with a few full-batch steps on its support set,
//! and `θ₀` moves against the query-loss gradient taken at the adapted
//! parameters.
//!
//! Binary form: `"IFSLMET1"`, u8 head kind (0 linear, 1 cosine), u32 heads,
//! u32 classes, u32 input dim, u32 inner steps, u64 tasks, f64 inner lr,
//! f64 outer lr, then per head `classes × dim` f32 weights and `classes`
//! f32 biases.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::adjust::{Adjuster, AdjustmentConfig};
use crate::episodes::{episode_rng, run_indexed, Episode, EpisodeShape};
use crate::error::{Error, Result};
use crate::evalmetrics::argmax;
use crate::heads::{
    fine_tune, mixture_loss_and_grad, mixture_probs, prepare, FitConfig, HeadGrad, HeadKind, HeadParams, Prepared,
};
use crate::knowledge::format::{put_f32s, Cursor};
use crate::knowledge::{FeatureDataset, KnowledgeBase, Labeled};
use crate::numerics::Matrix;

pub const META_MAGIC: &[u8; 8] = b"IFSLMET1";

#[derive(Debug, Clone, PartialEq)]
pub struct MetaInit {
    /// `θ₀`, one entry per head of the adjustment.
    pub init: Vec<HeadParams>,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
    pub tasks: usize,
}

impl MetaInit {
    /// Zero linear heads shaped for `adjustment` over `dim`-dimensional features.
    pub fn zeros(adjustment: &AdjustmentConfig, dim: usize, way: usize) -> Result<Self> {
        adjustment.validate(dim)?;
        let input = adjustment.head_input_dim(dim);
        let init = (0..adjustment.num_heads())
            .map(|_| HeadParams::linear_zeros(way, input))
            .collect::<Result<_>>()?;
        Ok(MetaInit {
            init,
            inner_lr: 0.01,
            inner_steps: 20,
            outer_lr: 0.01,
            tasks: 1000,
        })
    }

    pub fn validate(&self) -> Result<()> {
        // the outer rate may be zero, which freezes θ₀
        if !(self.inner_lr > 0.0 && self.outer_lr >= 0.0 && self.inner_lr.is_finite() && self.outer_lr.is_finite()) {
            return Err(Error::invalid(
                "inner learning rate must be positive, outer non-negative",
            ));
        }
        if self.inner_steps == 0 {
            return Err(Error::invalid("at least one inner step is required"));
        }
        let first = self
            .init
            .first()
            .ok_or_else(|| Error::invalid("initialization has no heads"))?;
        if first.kind() == HeadKind::Centroid {
            return Err(Error::invalid("centroid heads have no trainable parameters"));
        }
        if self.init.iter().any(|h| {
            h.kind() != first.kind() || h.num_classes() != first.num_classes() || h.input_dim() != first.input_dim()
        }) {
            return Err(Error::invalid(
                "all heads of an initialization must share kind and shape",
            ));
        }
        Ok(())
    }

    pub fn way(&self) -> usize {
        self.init[0].num_classes()
    }

    fn inner_fit(&self, steps: usize) -> FitConfig {
        FitConfig {
            iterations: steps,
            batch_size: usize::MAX,
            learning_rate: self.inner_lr,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    /// `steps` full-batch gradient steps from `θ₀` on `support`.
    pub fn adapt(&self, support: &[Prepared], steps: usize) -> Result<Vec<HeadParams>> {
        Ok(fine_tune(self.init.clone(), support, &self.inner_fit(steps))?.heads)
    }

    fn check_shape(&self, adjustment: &AdjustmentConfig, dim: usize, shape: &EpisodeShape) -> Result<()> {
        self.validate()?;
        adjustment.validate(dim)?;
        if self.init.len() != adjustment.num_heads()
            || self.init[0].input_dim() != adjustment.head_input_dim(dim)
            || self.way() != shape.way
        {
            return Err(Error::invalid(format!(
                "initialization has {} heads of {}×{}, the task needs {} heads of {}×{}",
                self.init.len(),
                self.way(),
                self.init[0].input_dim(),
                adjustment.num_heads(),
                shape.way,
                adjustment.head_input_dim(dim)
            )));
        }
        Ok(())
    }
}

/// Samples a task whose labels follow ascending dataset class order, so a
/// label keeps its meaning across tasks drawn from the same classes.
pub fn sample_task<R: Rng + ?Sized>(ds: &FeatureDataset, shape: EpisodeShape, rng: &mut R) -> Result<Episode> {
    shape.validate()?;
    if ds.num_classes() < shape.way {
        return Err(Error::invalid(format!(
            "{}-way tasks need {} classes, dataset has {} (short by {})",
            shape.way,
            shape.way,
            ds.num_classes(),
            shape.way - ds.num_classes()
        )));
    }
    let mut classes = index::sample(rng, ds.num_classes(), shape.way).into_vec();
    classes.sort_unstable();
    let per_class = shape.shot + shape.query;
    let mut ep = Episode {
        shape,
        support: Vec::new(),
        query: Vec::new(),
        class_map: classes.clone(),
        support_ids: Vec::new(),
        query_ids: Vec::new(),
        query_shift: Vec::new(),
    };
    for (label, &c) in classes.iter().enumerate() {
        let available = ds.class(c).len();
        if available < per_class {
            return Err(Error::invalid(format!(
                "class {c} has {available} samples, task needs {per_class} (short by {})",
                per_class - available
            )));
        }
        for (j, i) in index::sample(rng, available, per_class).into_iter().enumerate() {
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

/// Runs `mi.tasks` first-order meta-updates of `θ₀` and returns the
/// updated initialization.
pub fn meta_train<R: Rng + ?Sized>(
    ds: &FeatureDataset,
    shape: EpisodeShape,
    adjustment: &AdjustmentConfig,
    mi: &MetaInit,
    kb: Option<&KnowledgeBase>,
    rng: &mut R,
) -> Result<MetaInit> {
    mi.check_shape(adjustment, ds.dim(), &shape)?;
    let adjuster = Adjuster::new(*adjustment, ds.dim(), kb)?;
    let mut out = mi.clone();
    for _ in 0..mi.tasks {
        let ep = sample_task(ds, shape, rng)?;
        let support = prepare(&ep.support, &adjuster)?;
        let query = prepare(&ep.query, &adjuster)?;
        let adapted = out.adapt(&support, mi.inner_steps)?;

        let mut grads: Vec<HeadGrad> = adapted.iter().map(HeadGrad::zeros_like).collect();
        for q in &query {
            let (_, g) = mixture_loss_and_grad(&adapted, &q.components, q.label, 0.0)?;
            grads.iter_mut().zip(&g).for_each(|(t, gi)| t.add(gi));
        }
        let inv = 1.0 / query.len() as f64;
        for (h, g) in out.init.iter_mut().zip(grads.iter_mut()) {
            g.scale(inv);
            h.apply(g, mi.outer_lr);
        }
    }
    Ok(out)
}

/// Query accuracy (fraction) of `steps`-step adaptation from `mi` on
/// `tasks` tasks, task `i` drawn from stream `i` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_adapted(
    ds: &FeatureDataset,
    shape: EpisodeShape,
    adjustment: &AdjustmentConfig,
    mi: &MetaInit,
    kb: Option<&KnowledgeBase>,
    steps: usize,
    tasks: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>> {
    mi.check_shape(adjustment, ds.dim(), &shape)?;
    let adjuster = Adjuster::new(*adjustment, ds.dim(), kb)?;
    run_indexed(tasks, threads, |i| {
        let ep = sample_task(ds, shape, &mut episode_rng(seed, i as u64))?;
        let support = prepare(&ep.support, &adjuster)?;
        let heads = if steps == 0 {
            mi.init.clone()
        } else {
            mi.adapt(&support, steps)?
        };
        let mut correct = 0;
        for q in prepare(&ep.query, &adjuster)? {
            if argmax(&mixture_probs(&heads, &q.components)?) == q.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / ep.query.len() as f64)
    })
}

pub fn write_meta(mi: &MetaInit) -> Result<Vec<u8>> {
    mi.validate()?;
    let first = &mi.init[0];
    let kind: u8 = match first.kind() {
        HeadKind::Linear => 0,
        HeadKind::Cosine => 1,
        HeadKind::Centroid => unreachable!("rejected by validate"),
    };
    let mut out = Vec::new();
    out.extend_from_slice(META_MAGIC);
    out.push(kind);
    for v in [mi.init.len(), first.num_classes(), first.input_dim(), mi.inner_steps] {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(mi.tasks as u64).to_le_bytes());
    out.extend_from_slice(&mi.inner_lr.to_le_bytes());
    out.extend_from_slice(&mi.outer_lr.to_le_bytes());
    for h in &mi.init {
        put_f32s(&mut out, h.weights().as_slice())?;
        put_f32s(&mut out, h.bias())?;
    }
    Ok(out)
}

pub fn read_meta(bytes: &[u8]) -> Result<MetaInit> {
    let mut cur = Cursor::new(bytes);
    cur.magic(META_MAGIC)?;
    let kind = match cur.u8("head kind")? {
        0 => HeadKind::Linear,
        1 => HeadKind::Cosine,
        other => return Err(Error::format(8, format!("unknown head kind {other}"))),
    };
    let shape_at = cur.offset();
    let heads = cur.u32("head count")? as usize;
    let classes = cur.u32("class count")? as usize;
    let dim = cur.u32("input dim")? as usize;
    let inner_steps = cur.u32("inner steps")? as usize;
    let tasks = cur.u64("task count")? as usize;
    let inner_lr = cur.f64("inner learning rate")?;
    let outer_lr = cur.f64("outer learning rate")?;
    if heads == 0 || classes < 2 || dim == 0 {
        return Err(Error::format(
            shape_at,
            format!("degenerate shape: {heads} heads of {classes}×{dim}"),
        ));
    }
    let payload = (heads as u64) * (classes as u64) * (dim as u64 + 1) * 4;
    let remaining = bytes.len() as u64 - cur.offset();
    if remaining < payload {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated file: expected {payload} payload bytes, found {remaining}"),
        ));
    }
    let mut init = Vec::with_capacity(heads);
    for h in 0..heads {
        let at = cur.offset();
        let weights = Matrix::from_vec(classes, dim, cur.f32s(classes * dim, "head weights")?)?;
        let bias = cur.f32s(classes, "head bias")?;
        let head = match kind {
            HeadKind::Linear => HeadParams::linear(weights, bias),
            _ => HeadParams::cosine(weights),
        };
        init.push(head.map_err(|e| Error::format(at, format!("head {h}: {e}")))?);
    }
    cur.finish()?;
    let mi = MetaInit {
        init,
        inner_lr,
        inner_steps,
        outer_lr,
        tasks,
    };
    mi.validate().map_err(|e| Error::format(shape_at, e.to_string()))?;
    Ok(mi)
}

pub fn load_meta(path: impl AsRef<Path>) -> Result<MetaInit> {
    read_meta(&fs::read(path)?)
}

pub fn store_meta(mi: &MetaInit, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_meta(mi)?)?;
    Ok(())
}
