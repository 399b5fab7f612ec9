//! Synthetic confounded features and the linear instrumental-variable demo.
//!
//! Every sample of class `y` drawn under confounder stratum `d` is
//! `x = μ_y + β·v_d + σ·ε`. Pre-training classes draw their stratum from a
//! class-specific Dirichlet mixture, so the pre-trained classifier learns to
//! read the confounder; novel classes are stored per (class, stratum) cell so
//! episodes can tie support and query strata together or break them apart.

use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::episodes::{Episode, EpisodeShape};
use crate::error::{Error, Result};
use crate::heads::{fine_tune, prepare, FitConfig, HeadParams, Unadjusted};
use crate::knowledge::{FeatureDataset, KnowledgeBase, Labeled};
use crate::numerics::{mean_vector, norm};

/// Dirichlet concentration of the pre-training class/stratum mixtures.
pub const MIXTURE_CONCENTRATION: f64 = 0.5;

/// Fit of the synthetic pre-trained classifier.
pub const PRETRAIN_FIT: FitConfig = FitConfig {
    iterations: 500,
    batch_size: usize::MAX,
    learning_rate: 0.1,
    weight_decay: 1e-4,
    seed: 0,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    /// Pre-training classes.
    pub m: usize,
    pub k_novel: usize,
    pub n_conf: usize,
    pub beta: f64,
    pub sigma: f64,
    pub samples_per_pretrain_class: usize,
    pub samples_per_novel_cell: usize,
    /// Fraction of query samples whose stratum differs from their class's
    /// support stratum.
    pub mismatch_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 64,
            m: 16,
            k_novel: 16,
            n_conf: 4,
            beta: 2.0,
            sigma: 0.5,
            samples_per_pretrain_class: 100,
            samples_per_novel_cell: 20,
            mismatch_rate: 0.5,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("m", self.m),
            ("k_novel", self.k_novel),
            ("n_conf", self.n_conf),
            ("samples_per_pretrain_class", self.samples_per_pretrain_class),
            ("samples_per_novel_cell", self.samples_per_novel_cell),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if self.m < 2 {
            // the pre-trained classifier needs two classes
            return Err(Error::invalid("m must be at least 2"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite() && self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("beta and sigma must be finite and non-negative"));
        }
        check_rate(self.mismatch_rate)
    }
}

fn check_rate(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::invalid(format!("mismatch rate {rho} is outside [0, 1]")))
    }
}

/// Novel-class samples grouped by class, then stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedDataset {
    dim: usize,
    cells: Vec<Vec<Vec<Vec<f64>>>>,
}

impl StratifiedDataset {
    pub fn new(dim: usize, cells: Vec<Vec<Vec<Vec<f64>>>>) -> Result<Self> {
        let strata = cells.first().map_or(0, Vec::len);
        if cells.is_empty() || strata == 0 {
            return Err(Error::invalid("a stratified dataset needs classes and strata"));
        }
        for (c, class) in cells.iter().enumerate() {
            if class.len() != strata {
                return Err(Error::invalid(format!(
                    "class {c} has {} strata, expected {strata}",
                    class.len()
                )));
            }
            if class.iter().flatten().any(|x| x.len() != dim) {
                return Err(Error::invalid(format!("class {c} has a sample of the wrong dimension")));
            }
        }
        Ok(StratifiedDataset { dim, cells })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.cells.len()
    }

    pub fn num_strata(&self) -> usize {
        self.cells[0].len()
    }

    pub fn cell(&self, class: usize, stratum: usize) -> &[Vec<f64>] {
        &self.cells[class][stratum]
    }

    /// Flattens each class's strata in order. Returns the dataset and the
    /// stratum of every sample.
    pub fn to_features(&self) -> Result<(FeatureDataset, Vec<Vec<usize>>)> {
        let mut classes = Vec::with_capacity(self.cells.len());
        let mut tags = Vec::with_capacity(self.cells.len());
        for class in &self.cells {
            classes.push(class.iter().flatten().cloned().collect());
            tags.push(
                class
                    .iter()
                    .enumerate()
                    .flat_map(|(d, cell)| std::iter::repeat_n(d, cell.len()))
                    .collect(),
            );
        }
        Ok((FeatureDataset::new(self.dim, classes)?, tags))
    }

    /// Position of `(stratum, index)` within the flattened class.
    fn flat_index(&self, class: usize, stratum: usize, i: usize) -> usize {
        self.cells[class][..stratum].iter().map(Vec::len).sum::<usize>() + i
    }
}

/// The generating parameters, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// `μ` for the pre-training classes followed by the novel classes.
    pub class_directions: Vec<Vec<f64>>,
    pub confounder_directions: Vec<Vec<f64>>,
    /// Stratum mixture `π_j` of each pre-training class.
    pub mixtures: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub pretrain: FeatureDataset,
    pub kb: KnowledgeBase,
    pub novel: StratifiedDataset,
    pub truth: SynthTruth,
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dirichlet<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

fn emit<R: Rng + ?Sized>(mu: &[f64], v: &[f64], cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
    mu.iter()
        .zip(v)
        .map(|(m, c)| {
            let e: f64 = rng.sample(StandardNormal);
            m + cfg.beta * c + cfg.sigma * e
        })
        .collect()
}

/// Draws the directions and mixtures, samples both datasets and trains the
/// pre-trained classifier of the knowledge base.
pub fn gen_confounded<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthData> {
    cfg.validate()?;
    let class_directions: Vec<Vec<f64>> = (0..cfg.m + cfg.k_novel).map(|_| unit_vector(cfg.dim, rng)).collect();
    let confounder_directions: Vec<Vec<f64>> = (0..cfg.n_conf).map(|_| unit_vector(cfg.dim, rng)).collect();
    let mixtures: Vec<Vec<f64>> = (0..cfg.m)
        .map(|_| dirichlet(cfg.n_conf, MIXTURE_CONCENTRATION, rng))
        .collect();

    let mut pretrain = Vec::with_capacity(cfg.m);
    for j in 0..cfg.m {
        let pick = WeightedIndex::new(&mixtures[j])
            .map_err(|e| Error::invalid(format!("stratum mixture of class {j}: {e}")))?;
        let samples = (0..cfg.samples_per_pretrain_class)
            .map(|_| {
                let d = pick.sample(rng);
                emit(&class_directions[j], &confounder_directions[d], cfg, rng)
            })
            .collect();
        pretrain.push(samples);
    }
    let pretrain = FeatureDataset::new(cfg.dim, pretrain)?;

    let novel = (0..cfg.k_novel)
        .map(|c| {
            let mu = &class_directions[cfg.m + c];
            confounder_directions
                .iter()
                .map(|v| (0..cfg.samples_per_novel_cell).map(|_| emit(mu, v, cfg, rng)).collect())
                .collect()
        })
        .collect();
    let novel = StratifiedDataset::new(cfg.dim, novel)?;

    let kb = pretrain_knowledge(&pretrain)?;
    Ok(SynthData {
        pretrain,
        kb,
        novel,
        truth: SynthTruth {
            class_directions,
            confounder_directions,
            mixtures,
        },
    })
}

/// [`gen_confounded`] seeded from `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    gen_confounded(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Empirical class means plus a full-batch linear classifier over all classes.
pub fn pretrain_knowledge(pretrain: &FeatureDataset) -> Result<KnowledgeBase> {
    let means = pretrain
        .classes()
        .iter()
        .map(|c| mean_vector(c))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<Labeled> = pretrain.to_labeled();
    let prepared = prepare(&samples, &Unadjusted)?;
    let init = vec![HeadParams::linear_zeros(pretrain.num_classes(), pretrain.dim())?];
    let head = fine_tune(init, &prepared, &PRETRAIN_FIT)?.heads.remove(0);
    KnowledgeBase::new(means, head.weights().clone(), head.bias().to_vec())
}

/// Samples an episode whose classes are each tied to one stratum: support
/// samples come from that stratum, and each query leaves it with
/// probability `rho` for a uniformly chosen other stratum.
pub fn sample_confounded_episode<R: Rng + ?Sized>(
    novel: &StratifiedDataset,
    shape: EpisodeShape,
    rho: f64,
    rng: &mut R,
) -> Result<Episode> {
    shape.validate()?;
    check_rate(rho)?;
    let strata = novel.num_strata();
    if rho > 0.0 && strata < 2 {
        return Err(Error::invalid("mismatched queries need at least 2 strata"));
    }
    if novel.num_classes() < shape.way {
        return Err(Error::invalid(format!(
            "{}-way episodes need {} classes, dataset has {} (short by {})",
            shape.way,
            shape.way,
            novel.num_classes(),
            shape.way - novel.num_classes()
        )));
    }
    let classes = index::sample(rng, novel.num_classes(), shape.way).into_vec();
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
        let home = rng.random_range(0..strata);
        let query_strata: Vec<usize> = (0..shape.query)
            .map(|_| {
                if rng.random::<f64>() < rho {
                    // uniform over the other strata
                    let d = rng.random_range(0..strata - 1);
                    if d >= home {
                        d + 1
                    } else {
                        d
                    }
                } else {
                    home
                }
            })
            .collect();
        // draw every needed sample of a cell in one go so they stay distinct
        let mut pools = Vec::with_capacity(strata);
        for d in 0..strata {
            let need = query_strata.iter().filter(|&&q| q == d).count() + if d == home { shape.shot } else { 0 };
            let available = novel.cell(c, d).len();
            if need > available {
                return Err(Error::invalid(format!(
                    "class {c} stratum {d} has {available} samples, episode needs {need} (short by {})",
                    need - available
                )));
            }
            pools.push(index::sample(rng, available, need).into_vec().into_iter());
        }
        for _ in 0..shape.shot {
            let i = pools[home].next().unwrap();
            ep.support.push(Labeled::new(novel.cell(c, home)[i].clone(), label));
            ep.support_ids.push((c, novel.flat_index(c, home, i)));
        }
        for &d in &query_strata {
            let i = pools[d].next().unwrap();
            ep.query.push(Labeled::new(novel.cell(c, d)[i].clone(), label));
            ep.query_ids.push((c, novel.flat_index(c, d, i)));
            ep.query_shift.push(d != home);
        }
    }
    Ok(ep)
}

/// Linear-Gaussian model `X = a·I + b·D + ε_x`, `Y = c·X + e·D + ε_y` with
/// instrument `I` and hidden confounder `D`, both standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearScmConfig {
    pub a: f64,
    pub b: f64,
    pub c_true: f64,
    pub e: f64,
    pub noise_x: f64,
    pub noise_y: f64,
    pub samples: usize,
}

impl Default for LinearScmConfig {
    fn default() -> Self {
        LinearScmConfig {
            a: 1.0,
            b: 2.0,
            c_true: 3.0,
            e: 5.0,
            noise_x: 1.0,
            noise_y: 1.0,
            samples: 100_000,
        }
    }
}

impl LinearScmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::invalid("the IV demo needs at least 2 samples"));
        }
        if !(self.noise_x >= 0.0 && self.noise_y >= 0.0) {
            return Err(Error::invalid("noise standard deviations must be non-negative"));
        }
        let coeffs = [self.a, self.b, self.c_true, self.e, self.noise_x, self.noise_y];
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("coefficients must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvEstimate {
    pub ols_slope: f64,
    pub iv_estimate: f64,
    pub true_effect: f64,
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// Simulates the model and compares the confounded regression slope with
/// the instrumental estimate `Cov(I,Y)/Cov(I,X)`.
pub fn iv_demo<R: Rng + ?Sized>(cfg: &LinearScmConfig, rng: &mut R) -> Result<IvEstimate> {
    cfg.validate()?;
    let n = cfg.samples;
    let (mut i_s, mut x_s, mut y_s) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let i: f64 = rng.sample(StandardNormal);
        let d: f64 = rng.sample(StandardNormal);
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        let x = cfg.a * i + cfg.b * d + cfg.noise_x * ex;
        let y = cfg.c_true * x + cfg.e * d + cfg.noise_y * ey;
        i_s.push(i);
        x_s.push(x);
        y_s.push(y);
    }
    let cov_ix = covariance(&i_s, &x_s);
    if cov_ix.abs() < 1e-9 {
        return Err(Error::DegenerateInstrument(cov_ix));
    }
    let var_x = covariance(&x_s, &x_s);
    if var_x == 0.0 {
        return Err(Error::invalid("X has zero variance"));
    }
    Ok(IvEstimate {
        ols_slope: covariance(&x_s, &y_s) / var_x,
        iv_estimate: covariance(&i_s, &y_s) / cov_ix,
        true_effect: cfg.c_true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            dim: 16,
            m: 4,
            k_novel: 6,
            n_conf: 3,
            samples_per_pretrain_class: 30,
            samples_per_novel_cell: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        for bad in [
            SynthConfig { dim: 0, ..small() },
            SynthConfig { n_conf: 0, ..small() },
            SynthConfig { beta: -1.0, ..small() },
            SynthConfig {
                sigma: f64::NAN,
                ..small()
            },
            SynthConfig {
                mismatch_rate: 1.5,
                ..small()
            },
        ] {
            assert!(generate(&bad).is_err());
        }
    }

    #[test]
    fn noiseless_samples_are_class_directions() {
        let cfg = SynthConfig {
            beta: 0.0,
            sigma: 0.0,
            samples_per_pretrain_class: 1,
            samples_per_novel_cell: 1,
            ..small()
        };
        let data = generate(&cfg).unwrap();
        for j in 0..cfg.m {
            assert_eq!(data.pretrain.class(j)[0], data.truth.class_directions[j]);
        }
        for c in 0..cfg.k_novel {
            for d in 0..cfg.n_conf {
                assert_eq!(data.novel.cell(c, d)[0], data.truth.class_directions[cfg.m + c]);
            }
        }
    }

    #[test]
    fn unconfounded_means_converge() {
        let cfg = SynthConfig {
            beta: 0.0,
            sigma: 0.1,
            samples_per_pretrain_class: 500,
            ..small()
        };
        let data = generate(&cfg).unwrap();
        for (mean, mu) in data.kb.class_means().iter().zip(&data.truth.class_directions) {
            for (a, b) in mean.iter().zip(mu) {
                assert!((a - b).abs() < 0.02, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.pretrain, b.pretrain);
        assert_eq!(a.kb, b.kb);
        assert_eq!(a.novel, b.novel);
        assert_eq!(a.truth, b.truth);
        let c = generate(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.pretrain, c.pretrain);
    }

    #[test]
    fn mixtures_and_directions_are_well_formed() {
        let data = generate(&small()).unwrap();
        for pi in &data.truth.mixtures {
            assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(pi.iter().all(|&p| p >= 0.0));
        }
        for v in data
            .truth
            .class_directions
            .iter()
            .chain(&data.truth.confounder_directions)
        {
            assert!((norm(v) - 1.0).abs() < 1e-12);
        }
        // the pre-trained classifier separates its own training data well
        let correct = data
            .pretrain
            .iter()
            .filter(|(y, x)| crate::evalmetrics::argmax(&data.kb.pretrain_logits(x).unwrap()) == *y)
            .count();
        assert!(correct as f64 / data.pretrain.num_samples() as f64 > 0.8);
    }

    #[test]
    fn episode_strata() {
        let cfg = small();
        let data = generate(&cfg).unwrap();
        let (flat, tags) = data.novel.to_features().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = EpisodeShape::new(4, 2, 5);

        let tag = |id: &(usize, usize)| tags[id.0][id.1];
        for _ in 0..20 {
            let ep = sample_confounded_episode(&data.novel, shape, 0.0, &mut rng).unwrap();
            assert!(ep.query_shift.iter().all(|s| !s));
            for (label, &c) in ep.class_map.iter().enumerate() {
                let home: Vec<usize> = ep.support_ids[label * 2..label * 2 + 2].iter().map(tag).collect();
                assert_eq!(home[0], home[1]);
                assert!(ep.query_ids[label * 5..label * 5 + 5]
                    .iter()
                    .all(|id| id.0 == c && tag(id) == home[0]));
            }
            for (s, id) in ep.support.iter().zip(&ep.support_ids) {
                assert_eq!(s.x, flat.class(id.0)[id.1]);
            }

            let ep = sample_confounded_episode(&data.novel, shape, 1.0, &mut rng).unwrap();
            assert!(ep.query_shift.iter().all(|&s| s));
            for label in 0..4 {
                let home = tag(&ep.support_ids[label * 2]);
                assert!(ep.query_ids[label * 5..label * 5 + 5].iter().all(|id| tag(id) != home));
            }
            let mut ids = ep.support_ids.clone();
            ids.extend(&ep.query_ids);
            let before = ids.len();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), before);
        }
    }

    #[test]
    fn episode_errors() {
        let data = generate(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_confounded_episode(&data.novel, EpisodeShape::new(4, 11, 1), 0.0, &mut rng).unwrap_err();
        assert!(err.to_string().contains("short by"));
        assert!(sample_confounded_episode(&data.novel, EpisodeShape::new(7, 1, 1), 0.0, &mut rng).is_err());
        assert!(sample_confounded_episode(&data.novel, EpisodeShape::new(2, 1, 1), -0.1, &mut rng).is_err());
        let one = StratifiedDataset::new(1, vec![vec![vec![vec![0.0]; 4]]; 3]).unwrap();
        assert!(sample_confounded_episode(&one, EpisodeShape::new(2, 1, 1), 0.5, &mut rng).is_err());
        assert!(sample_confounded_episode(&one, EpisodeShape::new(2, 1, 1), 0.0, &mut rng).is_ok());
    }

    #[test]
    fn iv_recovers_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = iv_demo(&LinearScmConfig::default(), &mut rng).unwrap();
        assert!((est.iv_estimate - 3.0).abs() < 0.1);
        assert!((est.ols_slope - (3.0 + 10.0 / 6.0)).abs() < 0.1);
        assert_eq!(est.true_effect, 3.0);
    }

    #[test]
    fn iv_without_confounding_agrees_with_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = LinearScmConfig {
            b: 0.0,
            e: 0.0,
            ..LinearScmConfig::default()
        };
        let est = iv_demo(&cfg, &mut rng).unwrap();
        assert!((est.ols_slope - 3.0).abs() < 0.05);
        assert!((est.iv_estimate - 3.0).abs() < 0.05);
    }

    #[test]
    fn iv_null_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LinearScmConfig {
            c_true: 0.0,
            ..LinearScmConfig::default()
        };
        let est = iv_demo(&cfg, &mut rng).unwrap();
        assert!(est.iv_estimate.abs() < 0.1);
        assert!(est.ols_slope > 1.0);
    }

    #[test]
    fn iv_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let degenerate = LinearScmConfig {
            a: 0.0,
            b: 0.0,
            noise_x: 0.0,
            ..LinearScmConfig::default()
        };
        assert!(matches!(
            iv_demo(&degenerate, &mut rng),
            Err(Error::DegenerateInstrument(_))
        ));
        let few = LinearScmConfig {
            samples: 1,
            ..LinearScmConfig::default()
        };
        assert!(iv_demo(&few, &mut rng).is_err());
    }

    #[test]
    fn iv_converges_across_seeds() {
        let cfg = LinearScmConfig::default();
        for seed in 0..20 {
            let est = iv_demo(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!((est.iv_estimate - cfg.c_true).abs() < 0.05 * (1.0 + cfg.c_true.abs()));
        }
    }
}
