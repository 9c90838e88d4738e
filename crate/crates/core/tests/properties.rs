use hybridst::diffnum::Tensor;
use hybridst::evalkit::{compare_report, NamedPredictions};
use hybridst::graph::normalize_adjacency;
use hybridst::panel::{load_panel, store_panel, PanelFormat, SeriesPanel};
use hybridst::pipeline::{preprocess, PreprocessConfig};
use hybridst::preprocess::{flag_outliers, make_windows, Split, SplitPlan, WindowConfig};
use hybridst::synthgen::{generate_corpus, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_panel(seed: u64, n: usize, len: usize, missing: f64) -> SeriesPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n * len).map(|_| rng.random_range(0.0..90.0)).collect();
    let mask: Vec<bool> = (0..n * len).map(|_| !rng.random_bool(missing)).collect();
    let ids = (0..n).map(|i| format!("sensor_{i}")).collect();
    SeriesPanel::new(ids, 1_700_000_000, 300, len, values, mask).unwrap()
}

fn random_adjacency(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = rng.random_range(0.0..1.0);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                let w = rng.random_range(0.0..3.0);
                a[i * n + j] = w;
                a[j * n + i] = w;
            }
        }
    }
    a
}

/// Largest |eigenvalue| of a symmetric matrix by power iteration on its square.
fn power_radius(m: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    v.iter_mut().for_each(|x| *x += rng.random_range(0.0..1e-3));
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn panel_files_round_trip(seed in any::<u64>(), n in 1usize..6, len in 1usize..40, missing in 0.0f64..0.5) {
        let panel = random_panel(seed, n, len, missing);
        let dir = tempfile::tempdir().unwrap();
        for (format, name) in [(PanelFormat::Csv, "p.csv"), (PanelFormat::Bin, "p.bin")] {
            let path = dir.path().join(name);
            store_panel(&panel, &path, format).unwrap();
            let back = load_panel(&path, format).unwrap();
            prop_assert_eq!(back.sensor_ids(), panel.sensor_ids());
            prop_assert_eq!(back.timestamps(), panel.timestamps());
            prop_assert_eq!(back.mask(), panel.mask());
            prop_assert_eq!(back.valid_count(), panel.valid_count());
            for (i, (&a, &b)) in back.values().iter().zip(panel.values()).enumerate() {
                if panel.mask()[i] {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric_and_contractive(seed in any::<u64>(), n in 1usize..=20) {
        let a = random_adjacency(seed, n);
        let hat = normalize_adjacency(&Tensor::new(vec![n, n], a).unwrap()).unwrap();
        let d = hat.data();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(d[i * n + j].to_bits(), d[j * n + i].to_bits());
            }
        }
        prop_assert!(power_radius(d, n) <= 1.0 + 1e-9);
    }

    #[test]
    fn normalization_commutes_with_relabeling(seed in any::<u64>(), n in 2usize..=12) {
        let a = random_adjacency(seed, n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = (0..n * n).map(|k| a[perm[k / n] * n + perm[k % n]]).collect();
        let hat = normalize_adjacency(&Tensor::new(vec![n, n], a).unwrap()).unwrap();
        let hat_p = normalize_adjacency(&Tensor::new(vec![n, n], permuted).unwrap()).unwrap();
        for k in 0..n * n {
            let want = hat.data()[perm[k / n] * n + perm[k % n]];
            prop_assert!((hat_p.data()[k] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn outlier_flagging_is_idempotent(seed in any::<u64>(), spikes in 0usize..8) {
        let mut panel = random_panel(seed, 3, 120, 0.05);
        if spikes > 0 {
            let mut values = panel.values().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..spikes {
                let i = rng.random_range(0..values.len());
                values[i] = 400.0;
            }
            panel = SeriesPanel::new(
                panel.sensor_ids().to_vec(), panel.t0(), panel.step(), panel.len(), values, panel.mask().to_vec(),
            ).unwrap();
        }
        let cuts = [70, 95];
        let once = flag_outliers(&panel, 13, 3.0, &cuts).unwrap();
        let twice = flag_outliers(&once, 13, 3.0, &cuts).unwrap();
        prop_assert_eq!(once.mask(), twice.mask());
    }

    #[test]
    fn window_origins_are_ordered_by_split(len in 20usize..200, input_len in 1usize..8, horizon in 1usize..4) {
        prop_assume!(len >= input_len + horizon + 3);
        let panel = random_panel(len as u64, 2, len, 0.0);
        let cfg = WindowConfig { input_len, horizon, ..WindowConfig::default() };
        let ws = make_windows(&panel, &cfg).unwrap();
        prop_assert!(ws.origins.windows(2).all(|w| w[0] < w[1]));
        let rank = |s: Split| match s { Split::Train => 0, Split::Val => 1, Split::Test => 2 };
        prop_assert!(ws.splits.windows(2).all(|w| rank(w[0]) <= rank(w[1])));
    }

    #[test]
    fn report_rows_do_not_depend_on_model_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..80.0)).collect();
        let preds: Vec<Vec<f64>> = (0..3).map(|_| truth.iter().map(|t| t + rng.random_range(-5.0..5.0)).collect()).collect();
        let mask: Vec<bool> = (0..24).map(|_| rng.random_bool(0.8)).collect();
        let names = ["a", "b", "c"];
        let build = |order: &[usize]| {
            let models: Vec<NamedPredictions<'_>> =
                order.iter().map(|&i| NamedPredictions { name: names[i], values: &preds[i] }).collect();
            compare_report(&models, &truth, &mask, 3, "b", "x", 0).unwrap()
        };
        let fwd = build(&[0, 1, 2]);
        let rev = build(&[2, 1, 0]);
        for name in names {
            prop_assert_eq!(fwd.model(name), rev.model(name));
        }
    }
}

#[test]
fn validation_and_test_edits_never_reach_training_tensors() {
    let cfg = SynthConfig {
        nodes: 6,
        clusters: 2,
        days: 3,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let pre = PreprocessConfig::default();
    let w = &pre.windows;
    let plan = SplitPlan::new(corpus.panel.len(), w.input_len, w.horizon, w.splits).unwrap();
    let (base, _) = preprocess(&corpus.panel, &corpus.graph, &pre).unwrap();
    let panel = &corpus.panel;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let len = panel.len();
    let mut values = panel.values().to_vec();
    let mut mask = panel.mask().to_vec();
    for s in 0..panel.n_sensors() {
        for t in plan.train_end()..len {
            mask[s * len + t] = rng.random_bool(0.7);
            values[s * len + t] = rng.random_range(-50.0..300.0);
        }
    }
    let edited = SeriesPanel::new(panel.sensor_ids().to_vec(), panel.t0(), panel.step(), len, values, mask).unwrap();
    let (ws, _) = preprocess(&edited, &corpus.graph, &pre).unwrap();
    assert_eq!(ws.norm, base.norm);
    for s in base.indices(Split::Train) {
        assert_eq!(ws.input(s), base.input(s), "sample {s}");
        assert_eq!(ws.target(s), base.target(s), "sample {s}");
        assert_eq!(ws.mask(s), base.mask(s), "sample {s}");
    }
}
