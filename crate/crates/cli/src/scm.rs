//! Causal-graph queries: d-separation, do-calculus rule conditions,
//! instruments and backdoor sets.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use ifsl_core::causal_graph::BUILTIN_GRAPHS;
use ifsl_core::{iv_demo, Dag, LinearScmConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::failure::config;
use crate::report::{write_json, RunMeta};

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Built-in graph (confounded, many-shot, few-shot) or a graph JSON file
    #[arg(long, default_value = "confounded")]
    pub graph: String,
    /// JSON verdict path
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ScmCommand {
    /// Is X d-separated from Y given Z?
    Dsep {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        z: Vec<String>,
    },
    /// Is the instrument valid for treatment -> outcome?
    Iv {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, default_value = "I")]
        instrument: String,
        #[arg(long, default_value = "X")]
        treatment: String,
        #[arg(long, default_value = "Y")]
        outcome: String,
        /// Also estimate the effect on a simulated linear-Gaussian model
        #[arg(long)]
        simulate: bool,
        #[command(flatten)]
        model: ScmModelArgs,
    },
    /// Does the graphical condition of a do-calculus rule hold?
    Rule {
        #[command(flatten)]
        graph: GraphArgs,
        /// Rule number, 1 to 3
        #[arg(long)]
        rule: u8,
        #[arg(long, value_delimiter = ',')]
        x: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        z: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        w: Vec<String>,
    },
    /// Does Z satisfy the backdoor criterion for treatment -> outcome?
    Backdoor {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_delimiter = ',')]
        z: Vec<String>,
        #[arg(long, default_value = "X")]
        treatment: String,
        #[arg(long, default_value = "Y")]
        outcome: String,
    },
}

/// `X = a·I + b·D + ε_x`, `Y = c·X + e·D + ε_y` for `iv --simulate`.
#[derive(Debug, Clone, Copy, Args)]
pub struct ScmModelArgs {
    #[arg(long, default_value_t = LinearScmConfig::default().a)]
    pub a: f64,
    #[arg(long, default_value_t = LinearScmConfig::default().b)]
    pub b: f64,
    /// True causal effect of X on Y
    #[arg(long, default_value_t = LinearScmConfig::default().c_true)]
    pub c: f64,
    #[arg(long, default_value_t = LinearScmConfig::default().e)]
    pub e: f64,
    #[arg(long, default_value_t = LinearScmConfig::default().noise_x)]
    pub noise_x: f64,
    #[arg(long, default_value_t = LinearScmConfig::default().noise_y)]
    pub noise_y: f64,
    #[arg(long, default_value_t = LinearScmConfig::default().samples)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn load_graph(spec: &str) -> Result<Dag> {
    if BUILTIN_GRAPHS.contains(&spec) {
        return Ok(Dag::builtin(spec)?);
    }
    let text = fs::read_to_string(spec).map_err(|e| {
        config(format!(
            "{spec:?} is neither a built-in graph ({}) nor a readable file: {e}",
            BUILTIN_GRAPHS.join(", ")
        ))
    })?;
    Dag::from_json(&text).with_context(|| format!("graph {spec}"))
}

fn set(nodes: &[String]) -> String {
    format!("{{{}}}", nodes.join(", "))
}

fn holds(b: bool) -> &'static str {
    if b {
        "holds"
    } else {
        "does not hold"
    }
}

pub fn run(cmd: &ScmCommand) -> Result<()> {
    let start = Instant::now();
    let (args, verdict, mut body) = match cmd {
        ScmCommand::Dsep { graph, x, y, z } => {
            let g = load_graph(&graph.graph)?;
            let separated = g.d_separated(x, y, z)?;
            let text = format!(
                "{} and {} are {}d-separated given {}",
                set(x),
                set(y),
                if separated { "" } else { "not " },
                set(z)
            );
            (
                graph,
                text,
                json!({ "query": "dsep", "graph": g.to_spec(), "x": x, "y": y, "z": z, "separated": separated }),
            )
        }
        ScmCommand::Iv {
            graph,
            instrument,
            treatment,
            outcome,
            simulate,
            model,
        } => {
            let g = load_graph(&graph.graph)?;
            let valid = g.is_instrumental(instrument, treatment, outcome)?;
            let mut text = format!(
                "{instrument} is {}an instrument for {treatment} -> {outcome}",
                if valid { "" } else { "not " }
            );
            let estimate = if *simulate {
                let cfg = LinearScmConfig {
                    a: model.a,
                    b: model.b,
                    c_true: model.c,
                    e: model.e,
                    noise_x: model.noise_x,
                    noise_y: model.noise_y,
                    samples: model.samples,
                };
                let est = iv_demo(&cfg, &mut ChaCha8Rng::seed_from_u64(model.seed))?;
                text.push_str(&format!(
                    "\nsimulated: true effect {:.4}, regression slope {:.4}, instrumental estimate {:.4}",
                    est.true_effect, est.ols_slope, est.iv_estimate
                ));
                json!({ "model": cfg, "seed": model.seed, "estimate": est })
            } else {
                Value::Null
            };
            let body = json!({
                "query": "iv",
                "graph": g.to_spec(),
                "instrument": instrument,
                "treatment": treatment,
                "outcome": outcome,
                "instrumental": valid,
                "simulation": estimate,
            });
            (graph, text, body)
        }
        ScmCommand::Rule {
            graph,
            rule,
            x,
            y,
            z,
            w,
        } => {
            let g = load_graph(&graph.graph)?;
            let ok = g.rule_condition(*rule, x, y, z, w)?;
            let text = format!(
                "rule {rule} condition {} for X={} Y={} Z={} W={}",
                holds(ok),
                set(x),
                set(y),
                set(z),
                set(w)
            );
            let body = json!({
                "query": "rule",
                "graph": g.to_spec(),
                "rule": rule,
                "x": x,
                "y": y,
                "z": z,
                "w": w,
                "holds": ok,
            });
            (graph, text, body)
        }
        ScmCommand::Backdoor {
            graph,
            z,
            treatment,
            outcome,
        } => {
            let g = load_graph(&graph.graph)?;
            let ok = g.backdoor_admissible(z, treatment, outcome)?;
            let text = format!(
                "{} is {}backdoor-admissible for {treatment} -> {outcome}",
                set(z),
                if ok { "" } else { "not " }
            );
            let body = json!({
                "query": "backdoor",
                "graph": g.to_spec(),
                "z": z,
                "treatment": treatment,
                "outcome": outcome,
                "admissible": ok,
            });
            (graph, text, body)
        }
    };
    println!("{verdict}");
    if let Some(path) = &args.output {
        body["meta"] = serde_json::to_value(RunMeta::since(start))?;
        write_json(path, &body)?;
    }
    Ok(())
}
