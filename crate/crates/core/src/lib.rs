//! Interventional few-shot learning over precomputed feature embeddings.
//!
//! A few-shot classifier fitted on a support set inherits the bias of the
//! pre-trained knowledge that produced its features. This crate fits the
//! classifier heads through a backdoor adjustment over that knowledge
//! (feature-dimension strata, pre-training-class strata, or both) and ships
//! the surrounding pieces: episode sampling and evaluation, query hardness,
//! causal-graph checks, a synthetic confounded data generator and a
//! head-only learned initialization.

pub mod adjust;
pub mod causal_graph;
pub mod episodes;
mod error;
pub mod evalmetrics;
pub mod heads;
pub mod knowledge;
pub mod meta;
pub mod numerics;
pub mod synth;

pub use adjust::{predict, Adjuster, AdjustmentConfig, Strategy};
pub use causal_graph::{Dag, GraphSpec};
pub use episodes::{evaluate, run_episode, Episode, EpisodeConfig, EpisodeResult, EpisodeShape, QueryOutcome};
pub use error::{Error, Result};
pub use evalmetrics::{accuracy_report, hardness_report, query_hardness, HardnessBin, Report};
pub use heads::{fit_head, FitConfig, HeadKind, HeadParams};
pub use knowledge::{FeatureDataset, KnowledgeBase, Labeled, PartitionConfig};
pub use meta::{meta_train, MetaInit};
pub use numerics::Matrix;
pub use synth::{gen_confounded, iv_demo, LinearScmConfig, SynthConfig, SynthData};
