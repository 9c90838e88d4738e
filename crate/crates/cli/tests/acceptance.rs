//! Acceptance checks. Each test prints one `PASS`/`FAIL` line (written
//! straight to stdout so it shows without `--nocapture`) and then asserts.

mod common;

use std::io::Write as _;
use std::time::{Duration, Instant};

use hybridst::diffnum::Tensor;
use hybridst::ensemble::best_split;
use hybridst::evalkit::{compare_report, compute_metrics, NamedPredictions};
use hybridst::gradsuite::run_gradient_suite;
use hybridst::graph::{normalize_adjacency, SensorGraph};
use hybridst::hybrid::{train_stage1, ModelConfig, TrainConfig, Variant};
use hybridst::panel::SeriesPanel;
use hybridst::pipeline::{preprocess, PreprocessConfig};
use hybridst::preprocess::{Split, SplitPlan};
use hybridst::spatial::GcnConfig;
use hybridst::synthgen::{generate_corpus, SynthConfig};
use hybridst::temporal::EncoderConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn verdict(id: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance {id} [{}] {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {id} ({title}) failed: {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn c1_gradient_suite() {
    let started = Instant::now();
    let cases = run_gradient_suite(0).expect("suite runs");
    let elapsed = started.elapsed();
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = cases
        .iter()
        .filter(|c| !c.passed || c.max_rel_error.is_nan() || c.max_rel_error >= 1e-4)
        .map(|c| c.name.as_str())
        .collect();
    let need = ["gcn layer", "attention block", "fusion layer", "model loss hybridst"];
    let covered = need.iter().all(|n| cases.iter().any(|c| c.name == *n));
    verdict(
        1,
        "gradient suite",
        failed.is_empty() && covered && elapsed < Duration::from_secs(120),
        &format!(
            "{} cases, worst rel error {worst:.2e}, failed {failed:?}, {elapsed:.1?}",
            cases.len()
        ),
    );
}

// ---------------------------------------------------------------- 2

fn sse(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum()
}

/// Exhaustive search: every feature, every midpoint between sorted
/// distinct values, first strictly better candidate kept.
fn exhaustive(x: &[f64], nf: usize, y: &[f64]) -> Option<(usize, f64, f64)> {
    let n = y.len();
    if y.iter().all(|v| v.to_bits() == y[0].to_bits()) {
        return None;
    }
    let parent = sse(y);
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..nf {
        let mut vals: Vec<f64> = (0..n).map(|i| x[i * nf + f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = (w[0] + w[1]) / 2.0;
            let left: Vec<f64> = (0..n).filter(|&i| x[i * nf + f] <= thr).map(|i| y[i]).collect();
            let right: Vec<f64> = (0..n).filter(|&i| x[i * nf + f] > thr).map(|i| y[i]).collect();
            let gain = parent - sse(&left) - sse(&right);
            if best.is_none_or(|b| gain > b.2) {
                best = Some((f, thr, gain));
            }
        }
    }
    best
}

#[test]
fn c2_best_split_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = Vec::new();
    for k in 0..100 {
        let n = rng.random_range(2..=200);
        let nf = rng.random_range(1..=5);
        let grid = rng.random_bool(0.5);
        let x: Vec<f64> = (0..n * nf)
            .map(|_| {
                if grid {
                    rng.random_range(0..12) as f64 * 0.25
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| (x[i * nf] > 0.5) as u8 as f64 * 3.0 + rng.random_range(-2.0..2.0))
            .collect();
        let got = best_split(&x, nf, &y, &(0..nf).collect::<Vec<_>>()).expect("valid instance");
        let want = exhaustive(&x, nf, &y);
        let same = match (got, want) {
            (None, None) => true,
            (Some(g), Some(w)) => g.feature == w.0 && g.threshold == w.1 && g.gain == w.2,
            _ => false,
        };
        if !same {
            mismatches.push(k);
        }
    }
    verdict(
        2,
        "best_split oracle",
        mismatches.is_empty(),
        &format!("100 instances, mismatches at {mismatches:?}"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn c3_metric_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        mask[0] = true;
        let m = compute_metrics(&pred, &truth, &mask).unwrap();
        if m.rmse < m.mae {
            violations += 1;
        }
    }

    let hand = compute_metrics(&[1.0, -1.0, 2.0, -2.0], &[0.0; 4], &[true; 4]).unwrap();
    let hand_ok = (hand.mae - 1.5).abs() <= 1e-12 && (hand.rmse - 2.5f64.sqrt()).abs() <= 1e-12;

    let cells = 5 * 4 * 3;
    let truth: Vec<f64> = (0..cells).map(|_| rng.random_range(20.0..70.0)).collect();
    let a: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-4.0..4.0)).collect();
    let b: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-6.0..6.0)).collect();
    let mask: Vec<bool> = (0..cells).map(|i| i % 7 != 3).collect();
    let report = |truth: &[f64], a: &[f64], b: &[f64]| {
        compare_report(
            &[
                NamedPredictions { name: "a", values: a },
                NamedPredictions { name: "b", values: b },
            ],
            truth,
            &mask,
            3,
            "b",
            "synthetic",
            1,
        )
        .unwrap()
        .to_json()
    };
    let before = report(&truth, &a, &b);
    let (mut t2, mut a2, mut b2) = (truth.clone(), a.clone(), b.clone());
    for i in (0..cells).filter(|&i| !mask[i]) {
        t2[i] = f64::NAN;
        a2[i] = 1e9;
        b2[i] = -123.0;
    }
    let masked_ok = before == report(&t2, &a2, &b2);

    verdict(
        3,
        "metric identities",
        violations == 0 && hand_ok && masked_ok,
        &format!(
            "RMSE<MAE in {violations}/1000; hand MAE {} RMSE {}; masked perturbation identical: {masked_ok}",
            hand.mae, hand.rmse
        ),
    );
}

// ---------------------------------------------------------------- 4

fn spectral_radius(a: &Tensor) -> f64 {
    let n = a.shape()[0];
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.data());
    m.symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
}

#[test]
fn c4_graph_normalization() {
    let two = normalize_adjacency(&Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
    let two_ok = two.data().iter().all(|&v| (v - 0.5).abs() <= 1e-12);

    let path =
        normalize_adjacency(&Tensor::new(vec![3, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
    // degrees with self-loops are 2, 3, 2
    let e = 1.0 / 6f64.sqrt();
    let want = [0.5, e, 0.0, e, 1.0 / 3.0, e, 0.0, e, 0.5];
    let path_ok = path.data().iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=20);
        let density = rng.random_range(0.0..1.0);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(density) {
                    let w = rng.random_range(0.0..5.0);
                    a[i * n + j] = w;
                    a[j * n + i] = w;
                }
            }
        }
        let g = SensorGraph::from_adjacency(
            (0..n).map(|i| format!("s{i}")).collect(),
            Tensor::new(vec![n, n], a).unwrap(),
        )
        .unwrap();
        worst = worst.max(spectral_radius(g.normalized()));
    }
    verdict(
        4,
        "graph normalization",
        two_ok && path_ok && worst <= 1.0 + 1e-9,
        &format!("2-node {two_ok}, 3-path {path_ok}, max spectral radius over 100 graphs {worst:.12}"),
    );
}

// ---------------------------------------------------------------- 5

fn perturb_after(panel: &SeriesPanel, from: usize, seed: u64) -> SeriesPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = panel.len();
    let mut values = panel.values().to_vec();
    let mut mask = panel.mask().to_vec();
    for s in 0..panel.n_sensors() {
        for t in from..len {
            let i = s * len + t;
            match rng.random_range(0..10) {
                0 => mask[i] = false,
                1 => {
                    mask[i] = true;
                    values[i] = 500.0;
                }
                _ => {
                    mask[i] = true;
                    values[i] = rng.random_range(0.0..120.0);
                }
            }
        }
    }
    SeriesPanel::new(panel.sensor_ids().to_vec(), panel.t0(), panel.step(), len, values, mask).unwrap()
}

#[test]
fn c5_leak_freedom() {
    let synth: SynthConfig = serde_json::from_value(small_synth()).unwrap();
    let corpus = generate_corpus(&synth).unwrap();
    let cfg = PreprocessConfig::default();
    let w = &cfg.windows;
    let plan = SplitPlan::new(corpus.panel.len(), w.input_len, w.horizon, w.splits).unwrap();
    let test_start = plan.val_end();
    let model = ModelConfig {
        variant: Variant::Hybrid,
        gcn: GcnConfig {
            layers: 1,
            hidden_dim: 4,
        },
        encoder: EncoderConfig {
            blocks: 1,
            heads: 1,
            model_dim: 4,
            ffn_dim: 8,
            positional: true,
        },
    };
    let train = TrainConfig {
        batch_size: 32,
        max_epochs: 3,
        patience: 3,
        ..Default::default()
    };

    let run = |panel: &SeriesPanel| {
        let (ws, _) = preprocess(panel, &corpus.graph, &cfg).unwrap();
        let (m, report) = train_stage1(&ws, corpus.graph.normalized(), &model, &train, 7).unwrap();
        (ws, m, report)
    };
    let (ws0, m0, r0) = run(&corpus.panel);
    let mut problems = Vec::new();
    for seed in [1, 2] {
        let (ws1, m1, r1) = run(&perturb_after(&corpus.panel, test_start, seed));
        if ws0.norm != ws1.norm {
            problems.push(format!("perturbation {seed}: NormStats changed"));
        }
        for s in ws0.indices(Split::Train) {
            let same = bits(ws0.input(s)) == bits(ws1.input(s))
                && bits(ws0.target(s)) == bits(ws1.target(s))
                && ws0.mask(s) == ws1.mask(s);
            if !same {
                problems.push(format!("perturbation {seed}: train sample {s} changed"));
                break;
            }
        }
        let traj = |r: &hybridst::hybrid::TrainReport| {
            r.epochs
                .iter()
                .map(|e| (e.train_loss.to_bits(), e.val_mae.to_bits(), e.val_rmse.to_bits()))
                .collect::<Vec<_>>()
        };
        if traj(&r0) != traj(&r1) || r0.best_epoch != r1.best_epoch {
            problems.push(format!("perturbation {seed}: training trajectory changed"));
        }
        let params = |m: &hybridst::hybrid::HybridModel| {
            m.store
                .tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<_>>()
        };
        if params(&m0) != params(&m1) {
            problems.push(format!("perturbation {seed}: trained parameters changed"));
        }
        let test_changed = ws0
            .indices(Split::Test)
            .iter()
            .any(|&s| bits(ws0.target(s)) != bits(ws1.target(s)));
        if !test_changed {
            problems.push(format!("perturbation {seed}: did not reach the test tensors"));
        }
    }
    verdict(
        5,
        "leak-freedom",
        problems.is_empty(),
        &format!(
            "steps {test_start}.. perturbed twice, {} train samples, {} epochs compared; {problems:?}",
            ws0.indices(Split::Train).len(),
            r0.epochs.len()
        ),
    );
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ---------------------------------------------------------------- 6

/// Reduced model budget for the seed-42 benchmark; see README.
fn benchmark_run() -> serde_json::Value {
    serde_json::json!({
        "seed": 42,
        "model": {
            "gcn": {"layers": 2, "hidden_dim": 16},
            "encoder": {"blocks": 1, "heads": 2, "model_dim": 16, "ffn_dim": 32, "positional": true}
        },
        "train": {"batch_size": 64, "max_epochs": 12, "patience": 5, "adam": {"lr": 0.003}}
    })
}

#[test]
fn c6_end_to_end_benchmark() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let art = pipeline(tmp.path(), None, &benchmark_run(), 42, None);
    let test = art.report("report_test.json");
    let val = art.report("report_val.json");
    let elapsed = started.elapsed();

    let hyb_dl = mae(&test, "hybridst_dl");
    let hyb = mae(&test, "hybridst");
    let persistence = mae(&test, "persistence");
    let gcn = mae(&test, "gcn_only");
    let tr = mae(&test, "transformer_only");
    let val_final = mae(&val, "hybridst");
    let val_dl = mae(&val, "hybridst_dl");
    let gain = (hyb - hyb_dl) / hyb_dl * 100.0;

    let a = hyb_dl <= 0.90 * persistence;
    let b = hyb_dl <= gcn * 1.02 && hyb_dl <= tr * 1.02;
    let c = val_final <= val_dl && gain <= -2.0;
    let stage2 = art.report("stage2.json");
    verdict(
        6,
        "end-to-end synthetic benchmark",
        a && b && c && elapsed < Duration::from_secs(30 * 60),
        &format!(
            "(a) {a}: deep {hyb_dl:.4} vs 0.9 x persistence {:.4}; (b) {b}: gcn_only {gcn:.4}, transformer_only {tr:.4}; \
             (c) {c}: val final {val_final:.4} <= deep {val_dl:.4}, test final {hyb:.4} ({gain:+.2}%), alpha {}; {elapsed:.0?}",
            0.9 * persistence,
            stage2["stage2"]["alpha"]
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn c7_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<Artifacts> = [("a", Some(1)), ("b", Some(1)), ("c", Some(4))]
        .into_iter()
        .map(|(name, threads)| pipeline(&tmp.path().join(name), Some(&small_synth()), &small_run(), 5, threads))
        .collect();
    let files: Vec<_> = runs.iter().map(Artifacts::files).collect();
    let differ = |x: &[(String, Vec<u8>)], y: &[(String, Vec<u8>)]| {
        let mut names: Vec<String> = Vec::new();
        if x.len() != y.len() {
            names.push("file set".into());
        }
        for ((nx, bx), (ny, by)) in x.iter().zip(y) {
            if nx != ny || bx != by {
                names.push(nx.clone());
            }
        }
        names
    };
    let repeat = differ(&files[0], &files[1]);
    let threads = differ(&files[0], &files[2]);
    let checked = files[0]
        .iter()
        .filter(|(n, _)| n.ends_with(".hstc") || n.starts_with("report"))
        .count();
    verdict(
        7,
        "determinism",
        repeat.is_empty() && threads.is_empty() && checked >= 6,
        &format!(
            "{} files per run ({checked} checkpoints/reports); repeat differs in {repeat:?}; 1 vs 4 threads differs in {threads:?}",
            files[0].len()
        ),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn c8_relative_gain_convention() {
    let truth = [0.0; 4];
    let ours = [2.55; 4];
    let dcrnn = [2.81; 4];
    let report = compare_report(
        &[
            NamedPredictions {
                name: "hybridst",
                values: &ours,
            },
            NamedPredictions {
                name: "dcrnn",
                values: &dcrnn,
            },
        ],
        &truth,
        &[true; 4],
        1,
        "dcrnn",
        "metr-la",
        0,
    )
    .unwrap();
    let gain = report
        .gains
        .iter()
        .find(|g| g.model == "hybridst")
        .unwrap()
        .mae_pct
        .unwrap();
    verdict(
        8,
        "relative gain convention",
        (gain - (-9.25)).abs() <= 0.1,
        &format!("2.55 vs 2.81 gives {gain:.4}% MAE"),
    );
}
