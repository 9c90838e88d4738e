#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hybridst"));
    c.env_remove("HYBRIDST_THREADS").env_remove("RUST_LOG");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary starts")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "hybridst {} failed ({:?}):\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Generator settings small enough for a pipeline to finish in seconds.
pub fn small_synth() -> Value {
    serde_json::json!({
        "nodes": 8,
        "clusters": 2,
        "days": 4,
        "seed": 5
    })
}

/// Model and training settings matched to [`small_synth`].
pub fn small_run() -> Value {
    serde_json::json!({
        "seed": 11,
        "model": {
            "gcn": {"layers": 1, "hidden_dim": 4},
            "encoder": {"blocks": 1, "heads": 1, "model_dim": 4, "ffn_dim": 8, "positional": true}
        },
        "train": {"batch_size": 32, "max_epochs": 2, "patience": 2},
        "ensemble": {"n_trees": 10}
    })
}

pub struct Artifacts {
    pub dir: PathBuf,
    pub corpus: PathBuf,
}

impl Artifacts {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn report(&self, name: &str) -> Value {
        let text = std::fs::read_to_string(self.path(name)).expect("report exists");
        serde_json::from_str(&text).expect("report is JSON")
    }

    /// Every file the pipeline wrote, as (name, bytes), sorted by name.
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for dir in [&self.dir, &self.corpus] {
            for e in std::fs::read_dir(dir).unwrap() {
                let e = e.unwrap();
                if e.file_type().unwrap().is_file() {
                    let name = e.path().strip_prefix(&self.dir).unwrap().display().to_string();
                    out.push((name, std::fs::read(e.path()).unwrap()));
                }
            }
        }
        out.sort();
        out
    }
}

/// Synth → graph → preprocess → train (three variants) → ensemble →
/// evaluate on val and test. `synth` of `None` means generator defaults.
pub fn pipeline(dir: &Path, synth: Option<&Value>, run_cfg: &Value, seed: u64, threads: Option<usize>) -> Artifacts {
    std::fs::create_dir_all(dir).unwrap();
    let corpus = dir.join("corpus");
    let cfg = dir.join("run.json");
    std::fs::write(&cfg, run_cfg.to_string()).unwrap();
    let threads = threads.map(|n| n.to_string());
    let call = |args: &[&str]| {
        let mut full: Vec<&str> = Vec::new();
        if let Some(n) = &threads {
            full.extend(["--threads", n.as_str()]);
        }
        full.extend_from_slice(args);
        ok(&full)
    };

    let seed = seed.to_string();
    let mut synth_args = vec!["synth", "--out", p(&corpus), "--seed", seed.as_str()];
    let synth_path = dir.join("synth.json");
    if let Some(s) = synth {
        std::fs::write(&synth_path, s.to_string()).unwrap();
        synth_args.extend(["--config", p(&synth_path)]);
    }
    call(&synth_args);

    let panel = corpus.join("panel.csv");
    let graph = corpus.join("graph.bin");
    let exog = corpus.join("exog.csv");
    let f = |name: &str| dir.join(name);
    call(&[
        "graph",
        "--panel",
        p(&panel),
        "--config",
        p(&cfg),
        "--distances",
        p(&corpus.join("distances.csv")),
        "--out",
        p(&f("kernel_graph.bin")),
    ]);
    call(&[
        "preprocess",
        "--panel",
        p(&panel),
        "--graph",
        p(&graph),
        "--config",
        p(&cfg),
        "--out",
        p(&f("windows.bin")),
        "--stats",
        p(&f("stats.json")),
    ]);
    let windows = f("windows.bin");
    for variant in ["hybridst", "gcn-only", "transformer-only"] {
        call(&[
            "train",
            "--windows",
            p(&windows),
            "--graph",
            p(&graph),
            "--config",
            p(&cfg),
            "--variant",
            variant,
            "--out",
            p(&f(&format!("{variant}.hstc"))),
            "--report",
            p(&f(&format!("train_{variant}.json"))),
        ]);
    }
    call(&[
        "train-ensemble",
        "--windows",
        p(&windows),
        "--graph",
        p(&graph),
        "--checkpoint",
        p(&f("hybridst.hstc")),
        "--config",
        p(&cfg),
        "--exog",
        p(&exog),
        "--out",
        p(&f("hybridst_ens.hstc")),
        "--report",
        p(&f("stage2.json")),
    ]);
    for split in ["val", "test"] {
        call(&[
            "evaluate",
            "--windows",
            p(&windows),
            "--graph",
            p(&graph),
            "--checkpoint",
            p(&f("hybridst_ens.hstc")),
            "--ablation",
            p(&f("gcn-only.hstc")),
            "--ablation",
            p(&f("transformer-only.hstc")),
            "--exog",
            p(&exog),
            "--split",
            split,
            "--out",
            p(&f(&format!("report_{split}.json"))),
            "--table",
            p(&f(&format!("report_{split}.txt"))),
        ]);
    }
    call(&[
        "predict",
        "--windows",
        p(&windows),
        "--graph",
        p(&graph),
        "--checkpoint",
        p(&f("hybridst_ens.hstc")),
        "--exog",
        p(&exog),
        "--out",
        p(&f("forecast.csv")),
    ]);
    Artifacts {
        dir: dir.to_path_buf(),
        corpus,
    }
}

/// MAE of model `name` in an evaluation report.
pub fn mae(report: &Value, name: &str) -> f64 {
    report["models"]
        .as_array()
        .expect("models array")
        .iter()
        .find(|m| m["name"] == name)
        .unwrap_or_else(|| panic!("no row for {name}"))["mae"]
        .as_f64()
        .expect("numeric MAE")
}
