//! Episode evaluation, the synthetic confounding experiment and learned
//! initializations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use ifsl_core::episodes::{sample_episode, DEFAULT_QUERY};
use ifsl_core::evalmetrics::mean_ci95;
use ifsl_core::knowledge::{load_features, load_kb, store_features, store_kb, DEFAULT_THRESHOLD};
use ifsl_core::meta::{evaluate_adapted, load_meta, store_meta};
use ifsl_core::synth::{generate, sample_confounded_episode, SynthTruth};
use ifsl_core::{
    accuracy_report, evaluate, hardness_report, meta_train, AdjustmentConfig, EpisodeConfig, EpisodeResult,
    EpisodeShape, Error as CoreError, FeatureDataset, FitConfig, HeadKind, KnowledgeBase, MetaInit, PartitionConfig,
    Strategy, SynthConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::failure::config;
use crate::report::{write_json, write_query_csv, Report, RunMeta};

#[derive(Debug, Clone, Copy, Args)]
pub struct TaskArgs {
    /// Classes per episode (K)
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    /// Support samples per class (N)
    #[arg(long, default_value_t = 1)]
    pub shot: usize,
    /// Query samples per class
    #[arg(long, default_value_t = DEFAULT_QUERY)]
    pub query: usize,
}

impl TaskArgs {
    fn shape(&self) -> Result<EpisodeShape> {
        let shape = EpisodeShape::new(self.way, self.shot, self.query);
        shape.validate()?;
        Ok(shape)
    }
}

/// Feature strata of the feature-wise and combined adjustments.
#[derive(Debug, Clone, Copy, Args)]
pub struct PartitionArgs {
    /// Number of equal feature blocks
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Activation threshold of a feature
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub t: f64,
}

impl PartitionArgs {
    fn adjustment(&self, strategy: Strategy) -> AdjustmentConfig {
        AdjustmentConfig::new(strategy, PartitionConfig { n: self.n, t: self.t })
    }
}

#[derive(Debug, Clone, Copy, Args)]
pub struct FitArgs {
    /// Classifier head
    #[arg(long, default_value = "linear")]
    pub classifier: HeadKind,
    /// SGD steps on the support set
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Learning rate [default: 1e-2, or 5e-3 with an adjustment]
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    pub weight_decay: f64,
}

impl FitArgs {
    fn fit(&self, strategy: Strategy) -> Result<FitConfig> {
        let defaults = if strategy == Strategy::None {
            FitConfig::default()
        } else {
            FitConfig::adjusted()
        };
        let fit = FitConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.lr.unwrap_or(defaults.learning_rate),
            weight_decay: self.weight_decay,
            seed: 0,
        };
        fit.validate()?;
        Ok(fit)
    }

    fn episode_config(&self, adjustment: AdjustmentConfig) -> Result<EpisodeConfig> {
        Ok(EpisodeConfig {
            classifier: self.classifier,
            adjustment,
            fit: self.fit(adjustment.strategy)?,
        })
    }
}

#[derive(Debug, Args)]
pub struct EpisodesArgs {
    /// Feature file (IFSLFEA1 binary, or CSV with a .csv extension)
    #[arg(long)]
    pub features: PathBuf,
    /// Knowledge base (IFSLKB01)
    #[arg(long)]
    pub kb: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Backdoor adjustment: none, feature, class or combined
    #[arg(long, default_value = "none")]
    pub adjust: Strategy,
    #[command(flatten)]
    pub partition: PartitionArgs,
    /// Number of episodes (T)
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    /// Hardness quantile bins [default: none for episodes, 10 for hardness]
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path
    #[arg(long, short)]
    pub output: PathBuf,
    /// Per-query CSV path
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Per-bin CSV path
    #[arg(long)]
    pub bins_csv: Option<PathBuf>,
}

/// The resolved settings of an episode run, as recorded in its report.
#[derive(Debug, Serialize)]
struct EpisodesConfig<'a> {
    features: &'a Path,
    kb: &'a Path,
    shape: EpisodeShape,
    episodes: usize,
    #[serde(flatten)]
    model: EpisodeConfig,
    bins: usize,
    seed: u64,
}

fn check_count(name: &str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(config(format!("--{name} must be at least 1")));
    }
    Ok(())
}

/// Unreadable input files are configuration errors; malformed ones keep
/// their format classification.
fn input<T>(path: &Path, what: &str, load: impl FnOnce(&Path) -> ifsl_core::Result<T>) -> Result<T> {
    match load(path) {
        Ok(v) => Ok(v),
        Err(CoreError::Io(e)) => Err(config(format!("cannot read {what} {}: {e}", path.display()))),
        Err(e) => Err(anyhow::Error::new(e).context(format!("{what} {}", path.display()))),
    }
}

fn check_dims(ds: &FeatureDataset, kb: &KnowledgeBase) -> Result<()> {
    if ds.dim() != kb.dim() {
        return Err(config(format!(
            "knowledge base dimension {} does not match feature dimension {}",
            kb.dim(),
            ds.dim()
        )));
    }
    Ok(())
}

fn bins_of(results: &[EpisodeResult], bins: usize) -> Result<Vec<ifsl_core::HardnessBin>> {
    if bins == 0 {
        return Ok(Vec::new());
    }
    Ok(hardness_report(results, bins)?)
}

fn write_bins_csv(path: &Path, bins: &[ifsl_core::HardnessBin]) -> Result<()> {
    let mut out = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for b in bins {
        out.serialize(b)?;
    }
    out.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn episodes(args: &EpisodesArgs, default_bins: Option<usize>, threads: usize) -> Result<()> {
    let start = Instant::now();
    let shape = args.task.shape()?;
    check_count("episodes", args.episodes)?;
    let bins = args.bins.or(default_bins).unwrap_or(0);
    if default_bins.is_some() {
        check_count("bins", bins)?;
    }
    let adjustment = args.partition.adjustment(args.adjust);
    let cfg = args.fit.episode_config(adjustment)?;

    let ds = input(&args.features, "features", |p| load_features(p))?;
    let kb = input(&args.kb, "knowledge base", |p| load_kb(p))?;
    check_dims(&ds, &kb)?;
    adjustment.validate(ds.dim())?;
    if bins > args.episodes * shape.way * shape.query {
        return Err(config(format!(
            "{bins} hardness bins exceed the {} queries of the run",
            args.episodes * shape.way * shape.query
        )));
    }

    let results = evaluate(
        args.episodes,
        args.seed,
        threads,
        |rng| sample_episode(&ds, shape, rng),
        &cfg,
        &kb,
    )?;
    let summary = accuracy_report(&results)?;
    let hardness_bins = bins_of(&results, bins)?;
    let settings = EpisodesConfig {
        features: &args.features,
        kb: &args.kb,
        shape,
        episodes: args.episodes,
        model: cfg,
        bins,
        seed: args.seed,
    };
    if let Some(path) = &args.csv {
        write_query_csv(path, &results)?;
    }
    if let Some(path) = &args.bins_csv {
        write_bins_csv(path, &hardness_bins)?;
    }
    println!(
        "{} {}: {:.2}% ± {:.2} over {} episodes",
        cfg.classifier, cfg.adjustment.strategy, summary.mean_acc, summary.ci95, summary.episodes
    );
    for b in &hardness_bins {
        println!(
            "  hardness [{:.3}, {:.3}]  {:>6} queries  {:.2}%",
            b.lo, b.hi, b.count, b.acc
        );
    }
    write_json(
        &args.output,
        &Report {
            config: &settings,
            mean_acc: summary.mean_acc,
            ci95: summary.ci95,
            episodes: summary.episodes,
            hardness_bins,
            extra: Map::new(),
            meta: RunMeta::since(start),
        },
    )
}

#[derive(Debug, Clone, Copy, Args)]
pub struct SynthDataArgs {
    /// Feature dimension
    #[arg(long, default_value_t = SynthConfig::default().dim)]
    pub dim: usize,
    /// Pre-training classes
    #[arg(long, default_value_t = SynthConfig::default().m)]
    pub m: usize,
    /// Novel classes
    #[arg(long, default_value_t = SynthConfig::default().k_novel)]
    pub k_novel: usize,
    /// Confounder strata
    #[arg(long, default_value_t = SynthConfig::default().n_conf)]
    pub n_conf: usize,
    /// Confounder strength
    #[arg(long, default_value_t = SynthConfig::default().beta)]
    pub beta: f64,
    /// Noise standard deviation
    #[arg(long, default_value_t = SynthConfig::default().sigma)]
    pub sigma: f64,
    #[arg(long, default_value_t = SynthConfig::default().samples_per_pretrain_class)]
    pub samples_per_pretrain_class: usize,
    /// Samples per novel (class, stratum) cell
    #[arg(long, default_value_t = SynthConfig::default().samples_per_novel_cell)]
    pub samples_per_novel_cell: usize,
    /// Fraction of queries drawn outside their class's support stratum (rho)
    #[arg(long, default_value_t = SynthConfig::default().mismatch_rate)]
    pub mismatch_rate: f64,
    /// Generator seed
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub data_seed: u64,
}

impl SynthDataArgs {
    fn config(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            dim: self.dim,
            m: self.m,
            k_novel: self.k_novel,
            n_conf: self.n_conf,
            beta: self.beta,
            sigma: self.sigma,
            samples_per_pretrain_class: self.samples_per_pretrain_class,
            samples_per_novel_cell: self.samples_per_novel_cell,
            mismatch_rate: self.mismatch_rate,
            seed: self.data_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub data: SynthDataArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Adjustment of the compared classifier (the baseline has none)
    #[arg(long, default_value = "combined")]
    pub adjust: Strategy,
    #[command(flatten)]
    pub partition: PartitionArgs,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Episode seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for pretrain.ifsl, novel.ifsl, kb.ifsl and truth.json
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON report path
    #[arg(long, short)]
    pub output: PathBuf,
    /// Per-query CSV of the adjusted classifier
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SynthSettings<'a> {
    data: SynthConfig,
    shape: EpisodeShape,
    episodes: usize,
    baseline: EpisodeConfig,
    adjusted: EpisodeConfig,
    bins: usize,
    seed: u64,
    out_dir: &'a Path,
}

#[derive(Debug, Serialize)]
struct TruthFile<'a> {
    config: &'a SynthConfig,
    #[serde(flatten)]
    truth: &'a SynthTruth,
    /// Stratum of each novel sample, in feature-file order.
    novel_strata: &'a [Vec<usize>],
}

fn mean_hardness(results: &[EpisodeResult], shifted: bool) -> Option<f64> {
    let h: Vec<f64> = results
        .iter()
        .flat_map(|r| &r.queries)
        .filter(|q| q.stratum_shift == shifted)
        .map(|q| q.hardness)
        .collect();
    (!h.is_empty()).then(|| h.iter().sum::<f64>() / h.len() as f64)
}

fn per_episode_percent(results: &[EpisodeResult]) -> Vec<f64> {
    results.iter().map(|r| 100.0 * r.accuracy()).collect()
}

pub fn synth(args: &SynthArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let data_cfg = args.data.config()?;
    let shape = args.task.shape()?;
    check_count("episodes", args.episodes)?;
    check_count("bins", args.bins)?;
    if args.adjust == Strategy::None {
        return Err(config("--adjust must name an adjustment to compare with the baseline"));
    }
    let adjustment = args.partition.adjustment(args.adjust);
    adjustment.validate(data_cfg.dim)?;
    let baseline = args.fit.episode_config(AdjustmentConfig::none())?;
    let adjusted = args.fit.episode_config(adjustment)?;
    if args.bins > args.episodes * shape.way * shape.query {
        return Err(config("more hardness bins than queries"));
    }

    let data = generate(&data_cfg)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let (novel, strata) = data.novel.to_features()?;
    store_features(&data.pretrain, args.out_dir.join("pretrain.ifsl"))?;
    store_features(&novel, args.out_dir.join("novel.ifsl"))?;
    store_kb(&data.kb, args.out_dir.join("kb.ifsl"))?;
    write_json(
        &args.out_dir.join("truth.json"),
        &TruthFile {
            config: &data_cfg,
            truth: &data.truth,
            novel_strata: &strata,
        },
    )?;

    // both arms see the same episodes
    let run = |cfg: &EpisodeConfig| {
        evaluate(
            args.episodes,
            args.seed,
            threads,
            |rng| sample_confounded_episode(&data.novel, shape, data_cfg.mismatch_rate, rng),
            cfg,
            &data.kb,
        )
    };
    let base_results = run(&baseline)?;
    let adj_results = run(&adjusted)?;
    let base = accuracy_report(&base_results)?;
    let adj = accuracy_report(&adj_results)?;
    let base_bins = hardness_report(&base_results, args.bins)?;
    let adj_bins = hardness_report(&adj_results, args.bins)?;
    let diffs: Vec<f64> = per_episode_percent(&adj_results)
        .iter()
        .zip(per_episode_percent(&base_results))
        .map(|(a, b)| a - b)
        .collect();
    let (diff_mean, diff_ci) = mean_ci95(&diffs)?;
    let bins_not_worse = adj_bins.iter().zip(&base_bins).filter(|(a, b)| a.acc >= b.acc).count();

    if let Some(path) = &args.csv {
        write_query_csv(path, &adj_results)?;
    }
    println!("baseline: {:.2}% ± {:.2}", base.mean_acc, base.ci95);
    println!("{}: {:.2}% ± {:.2}", args.adjust, adj.mean_acc, adj.ci95);
    println!(
        "difference: {diff_mean:+.2} ± {diff_ci:.2}; not worse in {bins_not_worse} of {} hardness bins",
        args.bins
    );

    let mut extra = Map::new();
    extra.insert(
        "baseline".into(),
        json!({ "mean_acc": base.mean_acc, "ci95": base.ci95, "hardness_bins": base_bins }),
    );
    extra.insert(
        "difference".into(),
        json!({ "mean": diff_mean, "ci95": diff_ci, "bins_not_worse": bins_not_worse }),
    );
    extra.insert(
        "stratum_hardness".into(),
        json!({
            "matched": mean_hardness(&base_results, false),
            "mismatched": mean_hardness(&base_results, true),
        }),
    );
    let settings = SynthSettings {
        data: data_cfg,
        shape,
        episodes: args.episodes,
        baseline,
        adjusted,
        bins: args.bins,
        seed: args.seed,
        out_dir: &args.out_dir,
    };
    write_json(
        &args.output,
        &Report {
            config: &settings,
            mean_acc: adj.mean_acc,
            ci95: adj.ci95,
            episodes: adj.episodes,
            hardness_bins: adj_bins,
            extra,
            meta: RunMeta::since(start),
        },
    )
}

#[derive(Debug, Args)]
pub struct MetaArgs {
    /// Meta-training features
    #[arg(long)]
    pub features: PathBuf,
    /// Held-out evaluation features [default: odd-indexed samples of each
    /// class of --features, training on the even-indexed ones]
    #[arg(long)]
    pub eval_features: Option<PathBuf>,
    /// Knowledge base, required by the class-wise and combined adjustments
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value = "none")]
    pub adjust: Strategy,
    #[command(flatten)]
    pub partition: PartitionArgs,
    /// Meta-training tasks
    #[arg(long, default_value_t = 1000)]
    pub tasks: usize,
    /// Held-out evaluation tasks
    #[arg(long, default_value_t = 500)]
    pub eval_tasks: usize,
    #[arg(long, default_value_t = 0.01)]
    pub inner_lr: f64,
    #[arg(long, default_value_t = 20)]
    pub inner_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub outer_lr: f64,
    /// Initialization to continue from (IFSLMET1)
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Where to store the trained initialization
    #[arg(long)]
    pub init_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Serialize)]
struct MetaSettings<'a> {
    features: &'a Path,
    eval_features: Option<&'a Path>,
    kb: Option<&'a Path>,
    init: Option<&'a Path>,
    shape: EpisodeShape,
    adjustment: AdjustmentConfig,
    tasks: usize,
    eval_tasks: usize,
    inner_lr: f64,
    inner_steps: usize,
    outer_lr: f64,
    seed: u64,
}

/// Within every class, even-indexed samples for training and odd-indexed
/// ones for evaluation: held-out tasks share the classes but not the samples.
fn split_samples(ds: &FeatureDataset) -> Result<(FeatureDataset, FeatureDataset)> {
    let pick = |parity: usize| {
        let classes = ds
            .classes()
            .iter()
            .map(|samples| samples.iter().skip(parity).step_by(2).cloned().collect())
            .collect();
        FeatureDataset::new(ds.dim(), classes)
    };
    Ok((pick(0)?, pick(1)?))
}

pub fn meta(args: &MetaArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let shape = args.task.shape()?;
    check_count("eval-tasks", args.eval_tasks)?;
    let adjustment = args.partition.adjustment(args.adjust);
    if adjustment.strategy.uses_knowledge() && args.kb.is_none() {
        return Err(config(format!("--adjust {} needs --kb", adjustment.strategy)));
    }

    let ds = input(&args.features, "features", |p| load_features(p))?;
    let kb = args
        .kb
        .as_deref()
        .map(|p| input(p, "knowledge base", |p| load_kb(p)))
        .transpose()?;
    if let Some(kb) = &kb {
        check_dims(&ds, kb)?;
    }
    adjustment.validate(ds.dim())?;
    let (train, held_out) = match &args.eval_features {
        Some(p) => (ds, input(p, "features", |p| load_features(p))?),
        None => split_samples(&ds)?,
    };
    if held_out.dim() != train.dim() {
        return Err(config("evaluation features differ in dimension from training features"));
    }

    let zero = MetaInit {
        inner_lr: args.inner_lr,
        inner_steps: args.inner_steps,
        outer_lr: args.outer_lr,
        tasks: args.tasks,
        ..MetaInit::zeros(&adjustment, train.dim(), shape.way)?
    };
    zero.validate()?;
    let start_point = match &args.init {
        Some(p) => MetaInit {
            init: input(p, "initialization", |p| load_meta(p))?.init,
            ..zero.clone()
        },
        None => zero.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let learned = meta_train(&train, shape, &adjustment, &start_point, kb.as_ref(), &mut rng)?;
    if let Some(path) = &args.init_out {
        store_meta(&learned, path)?;
    }

    // evaluation tasks come from a stream family disjoint from training
    let eval_seed = args.seed.wrapping_add(1);
    let score = |mi: &MetaInit| -> Result<Vec<f64>> {
        let acc = evaluate_adapted(
            &held_out,
            shape,
            &adjustment,
            mi,
            kb.as_ref(),
            args.inner_steps,
            args.eval_tasks,
            eval_seed,
            threads,
        )?;
        Ok(acc.into_iter().map(|a| 100.0 * a).collect())
    };
    let learned_acc = score(&learned)?;
    let zero_acc = score(&zero)?;
    let (mean_acc, ci95) = mean_ci95(&learned_acc)?;
    let (zero_mean, zero_ci) = mean_ci95(&zero_acc)?;
    let diffs: Vec<f64> = learned_acc.iter().zip(&zero_acc).map(|(a, b)| a - b).collect();
    let (diff_mean, diff_ci) = mean_ci95(&diffs)?;

    println!("learned init: {mean_acc:.2}% ± {ci95:.2}");
    println!("zero init: {zero_mean:.2}% ± {zero_ci:.2}");
    println!("difference: {diff_mean:+.2} ± {diff_ci:.2}");

    let mut extra = Map::new();
    extra.insert("zero_init".into(), json!({ "mean_acc": zero_mean, "ci95": zero_ci }));
    extra.insert("difference".into(), json!({ "mean": diff_mean, "ci95": diff_ci }));
    extra.insert(
        "init_out".into(),
        args.init_out.as_ref().map_or(Value::Null, |p| json!(p)),
    );
    let settings = MetaSettings {
        features: &args.features,
        eval_features: args.eval_features.as_deref(),
        kb: args.kb.as_deref(),
        init: args.init.as_deref(),
        shape,
        adjustment,
        tasks: args.tasks,
        eval_tasks: args.eval_tasks,
        inner_lr: args.inner_lr,
        inner_steps: args.inner_steps,
        outer_lr: args.outer_lr,
        seed: args.seed,
    };
    write_json(
        &args.output,
        &Report {
            config: &settings,
            mean_acc,
            ci95,
            episodes: args.eval_tasks,
            hardness_bins: Vec::new(),
            extra,
            meta: RunMeta::since(start),
        },
    )
}
