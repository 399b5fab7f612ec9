//! End-to-end runs of the `ifsl` binary: reports, exit codes, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ifsl_core::knowledge::{store_features, store_kb};
use ifsl_core::synth::generate;
use ifsl_core::{FeatureDataset, KnowledgeBase, Matrix, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use tempfile::TempDir;

fn ifsl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifsl"))
        .args(args)
        .current_dir(dir)
        .env_remove("IFSL_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn without_meta(path: &Path) -> Value {
    let mut v = read_json(path);
    v.as_object_mut().unwrap().remove("meta");
    v
}

fn schema_errors(report: &Value) -> Vec<String> {
    let schema: Value = serde_json::from_str(include_str!("../schema/report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    validator.iter_errors(report).map(|e| e.to_string()).collect()
}

/// A small synthetic dataset written as `novel.ifsl` and `kb.ifsl`.
fn small_world() -> TempDir {
    let dir = TempDir::new().unwrap();
    let cfg = SynthConfig {
        dim: 16,
        m: 4,
        k_novel: 8,
        n_conf: 2,
        samples_per_pretrain_class: 30,
        samples_per_novel_cell: 10,
        ..SynthConfig::default()
    };
    let data = generate(&cfg).unwrap();
    store_features(&data.novel.to_features().unwrap().0, dir.path().join("novel.ifsl")).unwrap();
    store_kb(&data.kb, dir.path().join("kb.ifsl")).unwrap();
    dir
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random 512-dimensional features and a matching knowledge base.
fn wide_world() -> TempDir {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 512;
    let classes = (0..6)
        .map(|_| (0..20).map(|_| gaussian(&mut rng, dim)).collect())
        .collect();
    store_features(
        &FeatureDataset::new(dim, classes).unwrap(),
        dir.path().join("wide.ifsl"),
    )
    .unwrap();
    let means = (0..4).map(|_| gaussian(&mut rng, dim)).collect();
    let w = Matrix::from_vec(4, dim, gaussian(&mut rng, 4 * dim)).unwrap();
    store_kb(
        &KnowledgeBase::new(means, w, vec![0.0; 4]).unwrap(),
        dir.path().join("wide_kb.ifsl"),
    )
    .unwrap();
    dir
}

const EPISODE_FLAGS: [&str; 16] = [
    "episodes",
    "--features",
    "novel.ifsl",
    "--kb",
    "kb.ifsl",
    "--way",
    "5",
    "--shot",
    "1",
    "--episodes",
    "200",
    "--classifier",
    "linear",
    "--adjust",
    "combined",
    "--seed=7",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn episodes_report_is_complete_and_valid() {
    let dir = small_world();
    let out = ifsl(
        &with(&EPISODE_FLAGS, &["--n", "2", "-o", "r.json", "--csv", "q.csv"]),
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("r.json"));
    assert_eq!(report["episodes"], 200);
    let acc = report["mean_acc"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
    assert!(report["ci95"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["config"]["adjustment"]["strategy"], "combined");
    assert_eq!(report["config"]["fit"]["learning_rate"], 5e-3);
    assert!(report["config"].get("threads").is_none());
    assert_eq!(schema_errors(&report), Vec::<String>::new());

    let rows = std::fs::read_to_string(dir.path().join("q.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + 200 * 5 * 15);
}

#[test]
fn reruns_and_thread_counts_give_identical_reports() {
    let dir = small_world();
    let run = |name: &str, threads: &str| {
        let out = ifsl(
            &with(&EPISODE_FLAGS, &["--n", "4", "--threads", threads, "-o", name]),
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(dir.path().join(name)).unwrap()
    };
    let a = run("a.json", "1");
    let b = run("b.json", "1");
    let c = run("c.json", "4");
    let strip = |name: &str| without_meta(&dir.path().join(name));
    assert_eq!(strip("a.json"), strip("b.json"));
    assert_eq!(strip("a.json"), strip("c.json"));
    // everything before the metadata block is byte-identical
    let head = |bytes: &[u8]| {
        let text = String::from_utf8(bytes.to_vec()).unwrap();
        text[..text.find("\"meta\"").unwrap()].to_owned()
    };
    assert_eq!(head(&a), head(&b));
    assert_eq!(head(&a), head(&c));
}

#[test]
fn thread_count_falls_back_to_environment() {
    let dir = small_world();
    let out = Command::new(env!("CARGO_BIN_EXE_ifsl"))
        .args(with(&EPISODE_FLAGS, &["--n", "2", "-o", "r.json"]))
        .current_dir(dir.path())
        .env("IFSL_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--threads"));
}

#[test]
fn indivisible_feature_strata_exit_2() {
    let dir = wide_world();
    let out = ifsl(
        &[
            "episodes",
            "--features",
            "wide.ifsl",
            "--kb",
            "wide_kb.ifsl",
            "--adjust",
            "feature",
            "--n",
            "7",
            "--episodes",
            "5",
            "-o",
            "r.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("does not divide"), "{}", stderr(&out));
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn configuration_errors_exit_2() {
    let dir = small_world();
    let cases: [&[&str]; 7] = [
        &[
            "episodes",
            "--features",
            "missing.ifsl",
            "--kb",
            "kb.ifsl",
            "-o",
            "r.json",
        ],
        &[
            "episodes",
            "--features",
            "novel.ifsl",
            "--kb",
            "kb.ifsl",
            "--way",
            "0",
            "-o",
            "r.json",
        ],
        &[
            "episodes",
            "--features",
            "novel.ifsl",
            "--kb",
            "kb.ifsl",
            "--way",
            "9",
            "-o",
            "r.json",
        ],
        &[
            "episodes",
            "--features",
            "novel.ifsl",
            "--kb",
            "kb.ifsl",
            "--adjust",
            "sideways",
            "-o",
            "r.json",
        ],
        &[
            "hardness",
            "--features",
            "novel.ifsl",
            "--kb",
            "kb.ifsl",
            "--bins",
            "0",
            "-o",
            "r.json",
        ],
        &["scm", "dsep", "--graph", "no-such-graph", "--x", "X", "--y", "Y"],
        &["scm", "rule", "--rule", "4", "--y", "Y"],
    ];
    for args in cases {
        let out = ifsl(args, dir.path());
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
        assert!(!stderr(&out).is_empty());
    }
}

#[test]
fn malformed_files_exit_3() {
    let dir = small_world();
    let p = dir.path();
    let kb = std::fs::read(p.join("kb.ifsl")).unwrap();
    std::fs::write(p.join("short_kb.ifsl"), &kb[..kb.len() - 5]).unwrap();
    std::fs::write(p.join("junk.ifsl"), b"NOTMAGIC and then some").unwrap();
    std::fs::write(p.join("graph.json"), "{\"nodes\": [\"A\"], \"edges\": [[\"A\"").unwrap();
    let cases: [&[&str]; 4] = [
        &[
            "episodes",
            "--features",
            "novel.ifsl",
            "--kb",
            "short_kb.ifsl",
            "-o",
            "r.json",
        ],
        &["episodes", "--features", "junk.ifsl", "--kb", "kb.ifsl", "-o", "r.json"],
        &["scm", "dsep", "--graph", "graph.json", "--x", "A", "--y", "A"],
        &[
            "meta",
            "--features",
            "novel.ifsl",
            "--init",
            "junk.ifsl",
            "-o",
            "r.json",
        ],
    ];
    for args in cases {
        let out = ifsl(args, p);
        assert_eq!(code(&out), 3, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).contains("byte"), "{}", stderr(&out));
    }
}

#[test]
fn degenerate_instrument_is_a_runtime_failure() {
    let dir = TempDir::new().unwrap();
    let out = ifsl(
        &[
            "scm",
            "iv",
            "--graph",
            "many-shot",
            "--simulate",
            "--a",
            "0",
            "--b",
            "0",
            "--noise-x",
            "0",
            "--samples",
            "100",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("degenerate instrument"));
}

#[test]
fn hardness_defaults_to_ten_bins_covering_all_queries() {
    let dir = small_world();
    let out = ifsl(
        &[
            "hardness",
            "--features",
            "novel.ifsl",
            "--kb",
            "kb.ifsl",
            "--episodes",
            "40",
            "--query",
            "3",
            "-o",
            "h.json",
            "--bins-csv",
            "bins.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("h.json"));
    let bins = report["hardness_bins"].as_array().unwrap();
    assert_eq!(bins.len(), 10);
    let total: u64 = bins.iter().map(|b| b["count"].as_u64().unwrap()).sum();
    assert_eq!(total, 40 * 5 * 3);
    let pooled: f64 = bins
        .iter()
        .map(|b| b["acc"].as_f64().unwrap() * b["count"].as_f64().unwrap())
        .sum::<f64>()
        / total as f64;
    // per-episode mean equals pooled accuracy when episodes are equal-sized
    assert!((pooled - report["mean_acc"].as_f64().unwrap()).abs() < 1e-9);
    assert_eq!(schema_errors(&report), Vec::<String>::new());
    let rows = std::fs::read_to_string(dir.path().join("bins.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 11);
}

#[test]
fn synth_writes_dataset_and_side_by_side_report() {
    let dir = TempDir::new().unwrap();
    let out = ifsl(
        &[
            "synth",
            "--dim",
            "16",
            "--m",
            "4",
            "--k-novel",
            "6",
            "--n-conf",
            "2",
            "--n",
            "2",
            "--samples-per-pretrain-class",
            "30",
            "--samples-per-novel-cell",
            "16",
            "--episodes",
            "30",
            "--out-dir",
            "data",
            "-o",
            "s.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["pretrain.ifsl", "novel.ifsl", "kb.ifsl", "truth.json"] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }
    let truth = read_json(&dir.path().join("data/truth.json"));
    assert_eq!(truth["class_directions"].as_array().unwrap().len(), 4 + 6);
    assert_eq!(truth["novel_strata"].as_array().unwrap().len(), 6);

    let report = read_json(&dir.path().join("s.json"));
    assert_eq!(schema_errors(&report), Vec::<String>::new());
    assert_eq!(report["hardness_bins"].as_array().unwrap().len(), 10);
    let base = report["baseline"]["mean_acc"].as_f64().unwrap();
    let adjusted = report["mean_acc"].as_f64().unwrap();
    let diff = report["difference"]["mean"].as_f64().unwrap();
    assert!((adjusted - base - diff).abs() < 1e-9);
    assert!(report["stratum_hardness"]["mismatched"].is_number());

    // the generated files feed the episode command
    let again = ifsl(
        &[
            "episodes",
            "--features",
            "data/novel.ifsl",
            "--kb",
            "data/kb.ifsl",
            "--episodes",
            "5",
            "-o",
            "e.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&again), 0, "{}", stderr(&again));
}

#[test]
fn meta_stores_a_resumable_initialization() {
    let dir = small_world();
    let base = ["meta", "--features", "novel.ifsl", "--eval-tasks", "20", "--query", "3"];
    let out = ifsl(
        &with(&base, &["--tasks", "50", "--init-out", "init.met", "-o", "m.json"]),
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let init: PathBuf = dir.path().join("init.met");
    assert_eq!(&std::fs::read(&init).unwrap()[..8], b"IFSLMET1");
    let report = read_json(&dir.path().join("m.json"));
    assert_eq!(schema_errors(&report), Vec::<String>::new());
    assert_eq!(report["episodes"], 20);
    assert!(report["zero_init"]["mean_acc"].is_number());

    // zero further tasks from the stored init reproduce the same evaluation
    let out = ifsl(
        &with(&base, &["--init", "init.met", "--tasks", "0", "-o", "m2.json"]),
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resumed = read_json(&dir.path().join("m2.json"));
    let diff = (resumed["mean_acc"].as_f64().unwrap() - report["mean_acc"].as_f64().unwrap()).abs();
    // the stored weights are f32
    assert!(diff < 1.0, "{diff}");

    let out = ifsl(&with(&base, &["--adjust", "class", "-o", "m3.json"]), dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--kb"));
}

#[test]
fn scm_verdicts_on_built_in_graphs() {
    let dir = TempDir::new().unwrap();
    let run = |args: &[&str]| {
        let out = ifsl(args, dir.path());
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        stdout(&out)
    };
    assert!(run(&["scm", "iv", "--graph", "many-shot"]).contains("I is an instrument"));
    assert!(run(&["scm", "iv", "--graph", "few-shot"]).contains("I is not an instrument"));
    assert!(run(&["scm", "backdoor", "--z", "D"]).contains("{D} is backdoor-admissible"));
    assert!(run(&["scm", "backdoor"]).contains("{} is not backdoor-admissible"));
    assert!(run(&["scm", "dsep", "--x", "D", "--y", "Y", "--z", "X,C"]).contains("are d-separated"));
    assert!(run(&["scm", "rule", "--rule", "2", "--x", "X", "--y", "Y", "--z", "D"]).contains("holds"));

    run(&["scm", "iv", "--graph", "many-shot", "--simulate", "-o", "iv.json"]);
    let v = read_json(&dir.path().join("iv.json"));
    assert_eq!(v["instrumental"], true);
    let est = v["simulation"]["estimate"]["iv_estimate"].as_f64().unwrap();
    assert!((est - 3.0).abs() < 0.1, "{est}");

    std::fs::write(
        dir.path().join("chain.json"),
        r#"{"nodes": ["A", "B", "C"], "edges": [["A", "B"], ["B", "C"]]}"#,
    )
    .unwrap();
    assert!(run(&[
        "scm",
        "dsep",
        "--graph",
        "chain.json",
        "--x",
        "A",
        "--y",
        "C",
        "--z",
        "B"
    ])
    .contains("are d-separated"));
    run(&[
        "scm",
        "dsep",
        "--graph",
        "chain.json",
        "--x",
        "A",
        "--y",
        "C",
        "-o",
        "d.json",
    ]);
    assert_eq!(read_json(&dir.path().join("d.json"))["separated"], false);
}
