//! Masked metrics, baselines and comparison reports.
//!
//! Prediction arrays are flat `[samples, nodes, horizon]` in km/h unless
//! stated otherwise; the mask marks the cells that count.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{NormStats, Split, WindowSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

impl Metrics {
    /// RMSE/MAE; undefined when the MAE is zero.
    pub fn ratio(&self) -> Option<f64> {
        (self.mae > 0.0).then(|| self.rmse / self.mae)
    }
}

/// Masked MAE and RMSE.
pub fn compute_metrics(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "metrics: {} predictions, {} targets, {} mask cells",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            let e = p - t;
            abs += e.abs();
            sq += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation("metrics: mask selects no cells".into()));
    }
    let mae = abs / n as f64;
    // the power-mean inequality holds exactly; rounding can undercut it by an ulp
    let rmse = (sq / n as f64).sqrt().max(mae);
    if !mae.is_finite() || !rmse.is_finite() {
        return Err(Error::Computation("metrics: non-finite error".into()));
    }
    Ok(Metrics { mae, rmse })
}

/// `(model − reference) / reference × 100`; negative means the model is better.
pub fn relative_gain(model: f64, reference: f64) -> Option<f64> {
    (reference != 0.0).then(|| (model - reference) / reference * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based step ahead.
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    pub mae: f64,
    pub rmse: f64,
    pub ratio: Option<f64>,
    pub per_horizon: Vec<HorizonMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub model: String,
    pub mae_pct: Option<f64>,
    pub rmse_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub seed: u64,
    pub models: Vec<ModelMetrics>,
    pub reference: String,
    pub gains: Vec<Gain>,
    /// Effective run configuration, echoed for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub struct NamedPredictions<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

/// Metrics for every model plus gains relative to `reference`.
pub fn compare_report(
    models: &[NamedPredictions<'_>],
    truth: &[f64],
    mask: &[bool],
    horizon: usize,
    reference: &str,
    dataset: &str,
    seed: u64,
) -> Result<MetricReport> {
    if horizon == 0 || !truth.len().is_multiple_of(horizon) {
        return Err(Error::Dimension(format!(
            "{} cells do not split into horizon {horizon}",
            truth.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        if !seen.insert(m.name) {
            return Err(Error::Validation(format!("model {} listed twice", m.name)));
        }
        let all = compute_metrics(m.values, truth, mask).map_err(|e| in_model(e, m.name))?;
        let mut per_horizon = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let pick = |v: &[f64]| v.iter().skip(h).step_by(horizon).copied().collect::<Vec<_>>();
            let hm: Vec<bool> = mask.iter().skip(h).step_by(horizon).copied().collect();
            let mh = compute_metrics(&pick(m.values), &pick(truth), &hm).map_err(|e| in_model(e, m.name))?;
            per_horizon.push(HorizonMetrics {
                horizon: h + 1,
                mae: mh.mae,
                rmse: mh.rmse,
                ratio: mh.ratio(),
            });
        }
        rows.push(ModelMetrics {
            name: m.name.to_string(),
            mae: all.mae,
            rmse: all.rmse,
            ratio: all.ratio(),
            per_horizon,
        });
    }
    let ref_row = rows
        .iter()
        .find(|r| r.name == reference)
        .ok_or_else(|| Error::Validation(format!("reference model {reference} is not among the compared models")))?
        .clone();
    let gains = rows
        .iter()
        .map(|r| Gain {
            model: r.name.clone(),
            mae_pct: relative_gain(r.mae, ref_row.mae),
            rmse_pct: relative_gain(r.rmse, ref_row.rmse),
        })
        .collect();
    Ok(MetricReport {
        dataset: dataset.to_string(),
        seed,
        models: rows,
        reference: reference.to_string(),
        gains,
        config: None,
    })
}

fn in_model(e: Error, name: &str) -> Error {
    match e {
        Error::Dimension(m) => Error::Dimension(format!("model {name}: {m}")),
        Error::Validation(m) => Error::Validation(format!("model {name}: {m}")),
        other => other,
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl MetricReport {
    pub fn model(&self, name: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned plain-text table, one row per model and per horizon.
    pub fn to_table(&self) -> String {
        let header = [
            "model",
            "horizon",
            "MAE",
            "RMSE",
            "RMSE/MAE",
            "gain MAE %",
            "gain RMSE %",
        ];
        let mut rows: Vec<[String; 7]> = Vec::new();
        for (m, g) in self.models.iter().zip(&self.gains) {
            rows.push([
                m.name.clone(),
                "all".into(),
                format!("{:.4}", m.mae),
                format!("{:.4}", m.rmse),
                fmt_opt(m.ratio, 3),
                fmt_opt(g.mae_pct, 2),
                fmt_opt(g.rmse_pct, 2),
            ]);
            for h in &m.per_horizon {
                rows.push([
                    m.name.clone(),
                    h.horizon.to_string(),
                    format!("{:.4}", h.mae),
                    format!("{:.4}", h.rmse),
                    fmt_opt(h.ratio, 3),
                    String::new(),
                    String::new(),
                ]);
            }
        }
        let mut width = header.map(str::len);
        for r in &rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "dataset {} | seed {} | reference {}",
            self.dataset, self.seed, self.reference
        );
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(width).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, "  {c:>w$}");
                }
            }
            s.trim_end().to_string()
        };
        out.push_str(&line(&header.map(String::from)));
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    /// Long-format plot data: `model,horizon,metric,value`.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("model,horizon,metric,value\n");
        for m in &self.models {
            let mut put = |h: &str, metric: &str, v: Option<f64>| {
                if let Some(v) = v {
                    let _ = writeln!(out, "{},{h},{metric},{v}", m.name);
                }
            };
            put("all", "mae", Some(m.mae));
            put("all", "rmse", Some(m.rmse));
            put("all", "ratio", m.ratio);
            for h in &m.per_horizon {
                let hs = h.horizon.to_string();
                put(&hs, "mae", Some(h.mae));
                put(&hs, "rmse", Some(h.rmse));
                put(&hs, "ratio", h.ratio);
            }
        }
        out
    }
}

/// Maps normalized predictions `[k, N, H]` back to km/h.
pub fn denormalize(norm: &NormStats, values: &[f64], nodes: usize, horizon: usize) -> Result<Vec<f64>> {
    if norm.mean.len() != nodes || !values.len().is_multiple_of(nodes * horizon) {
        return Err(Error::Dimension(format!(
            "denormalize: {} values for {nodes} nodes × {horizon} steps",
            values.len()
        )));
    }
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &z)| norm.denormalize((i / horizon) % nodes, z))
        .collect())
}

/// Targets of `indices` in km/h with their validity mask.
pub fn targets_kmh(ws: &WindowSet, indices: &[usize]) -> Result<(Vec<f64>, Vec<bool>)> {
    let norm = ws.norm()?;
    let mut truth = Vec::with_capacity(indices.len() * ws.nodes * ws.horizon);
    let mut mask = Vec::with_capacity(truth.capacity());
    for &s in indices {
        truth.extend(ws.target(s).iter().map(|&v| v as f64));
        mask.extend_from_slice(ws.mask(s));
    }
    Ok((denormalize(norm, &truth, ws.nodes, ws.horizon)?, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Persistence,
    HistoricalAverage,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Persistence => "persistence",
            BaselineKind::HistoricalAverage => "historical_average",
        }
    }
}

/// Baseline forecasts in km/h for the samples in `indices`.
///
/// Persistence repeats the reading at the origin. The historical average
/// is the mean valid reading of each (sensor, time-of-day slot) over the
/// training targets, falling back to the sensor's training mean.
pub fn run_baseline(kind: BaselineKind, ws: &WindowSet, indices: &[usize]) -> Result<Vec<f64>> {
    let norm = ws.norm()?;
    let (n, h) = (ws.nodes, ws.horizon);
    let mut out = Vec::with_capacity(indices.len() * n * h);
    match kind {
        BaselineKind::Persistence => {
            for &s in indices {
                for node in 0..n {
                    let v = norm.denormalize(node, ws.last_value(s, node) as f64);
                    out.extend(std::iter::repeat_n(v, h));
                }
            }
        }
        BaselineKind::HistoricalAverage => {
            if ws.step <= 0 {
                return Err(Error::Validation("historical average needs a positive step".into()));
            }
            let slot_of = |step: usize| (ws.t0 + ws.step * step as i64).rem_euclid(86_400) / ws.step;
            let mut sums: HashMap<(usize, i64), (f64, usize)> = HashMap::new();
            let mut next_new = 0usize;
            for s in ws.indices(Split::Train) {
                for k in 0..h {
                    let step = ws.origins[s] + 1 + k;
                    if step < next_new {
                        continue;
                    }
                    next_new = step + 1;
                    for node in 0..n {
                        if ws.mask(s)[node * h + k] {
                            let v = norm.denormalize(node, ws.target(s)[node * h + k] as f64);
                            let e = sums.entry((node, slot_of(step))).or_insert((0.0, 0));
                            e.0 += v;
                            e.1 += 1;
                        }
                    }
                }
            }
            for &s in indices {
                for node in 0..n {
                    for k in 0..h {
                        let v = match sums.get(&(node, slot_of(ws.origins[s] + 1 + k))) {
                            Some(&(sum, c)) => sum / c as f64,
                            None => norm.mean[node],
                        };
                        out.push(v);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::SeriesPanel;
    use crate::preprocess::{apply_normalizer, fit_normalizer, make_windows, Direction, SplitFractions, WindowConfig};

    fn windows(values: Vec<f64>, sensors: usize, step: i64, cfg: WindowConfig) -> WindowSet {
        let len = values.len() / sensors;
        let ids = (0..sensors).map(|i| format!("s{i}")).collect();
        let p = SeriesPanel::from_dense(ids, 0, step, len, values).unwrap();
        let plan = crate::preprocess::SplitPlan::new(len, cfg.input_len, cfg.horizon, cfg.splits).unwrap();
        let norm = fit_normalizer(&p, 0..plan.train_end()).unwrap();
        let z = apply_normalizer(&p, &norm, Direction::Forward).unwrap();
        let mut ws = make_windows(&z, &cfg).unwrap();
        ws.norm = Some(norm);
        ws
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[1.0, -1.0, 2.0, -2.0], &[0.0; 4], &[true; 4]).unwrap();
        assert_eq!(m.mae, 1.5);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((m.rmse - 1.58114).abs() < 1e-5);

        let m = compute_metrics(&[5.0, 7.0], &[5.0, 7.0], &[true, true]).unwrap();
        assert_eq!((m.mae, m.rmse), (0.0, 0.0));
        assert_eq!(m.ratio(), None);

        let m = compute_metrics(&[3.0], &[0.0], &[true]).unwrap();
        assert_eq!((m.mae, m.rmse), (3.0, 3.0));

        assert!(matches!(
            compute_metrics(&[1.0], &[0.0], &[false]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            compute_metrics(&[1.0], &[0.0, 1.0], &[true]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gain_convention() {
        let g = relative_gain(2.55, 2.81).unwrap();
        assert!((g - (-9.2527)).abs() < 1e-3);
        assert_eq!(relative_gain(3.0, 3.0), Some(0.0));
        assert_eq!(relative_gain(1.0, 0.0), None);
    }

    #[test]
    fn report_schema_and_errors() {
        let truth = vec![0.0; 6];
        let mask = vec![true; 6];
        let a = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let b = vec![2.0; 6];
        let models = [
            NamedPredictions { name: "a", values: &a },
            NamedPredictions { name: "b", values: &b },
        ];
        let r = compare_report(&models, &truth, &mask, 3, "b", "toy", 7).unwrap();
        assert_eq!(r.models.len(), 2);
        assert_eq!(r.models[0].per_horizon.len(), 3);
        assert_eq!(r.models[0].per_horizon[2].mae, 3.0);
        assert!(r.models.iter().all(|m| m.ratio.is_some()));
        assert_eq!(r.gains[1].mae_pct, Some(0.0));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["dataset", "seed", "models", "reference", "gains"] {
            assert!(keys.contains(&k));
        }
        assert!(r.to_table().contains("RMSE/MAE"));
        assert!(r.plot_csv().starts_with("model,horizon,metric,value\na,all,mae,2\n"));
        assert!(compare_report(&models, &truth, &mask, 3, "zzz", "toy", 7).is_err());
    }

    #[test]
    fn constant_series_persistence_is_exact() {
        let ws = windows(
            vec![60.0; 2 * 40],
            2,
            300,
            WindowConfig {
                input_len: 4,
                horizon: 2,
                ..Default::default()
            },
        );
        let idx = ws.indices(Split::Test);
        let pred = run_baseline(BaselineKind::Persistence, &ws, &idx).unwrap();
        let (truth, mask) = targets_kmh(&ws, &idx).unwrap();
        assert_eq!(compute_metrics(&pred, &truth, &mask).unwrap().mae, 0.0);
    }

    #[test]
    fn ramp_persistence_error_grows_with_horizon() {
        // slope 0.01 km/h per second at 300 s steps: 3 km/h per step
        let values: Vec<f64> = (0..60).map(|t| 20.0 + 3.0 * t as f64).collect();
        let ws = windows(
            values,
            1,
            300,
            WindowConfig {
                input_len: 4,
                horizon: 3,
                time_features: false,
                ..Default::default()
            },
        );
        let idx = ws.indices(Split::Test);
        let pred = run_baseline(BaselineKind::Persistence, &ws, &idx).unwrap();
        let (truth, mask) = targets_kmh(&ws, &idx).unwrap();
        let r = compare_report(
            &[NamedPredictions {
                name: "p",
                values: &pred,
            }],
            &truth,
            &mask,
            3,
            "p",
            "ramp",
            0,
        )
        .unwrap();
        for h in &r.models[0].per_horizon {
            assert!((h.mae - 0.01 * 300.0 * h.horizon as f64).abs() < 1e-3, "{h:?}");
        }
    }

    #[test]
    fn daily_periodic_series_historical_average_is_exact() {
        // 12 steps per day (2-hour step), 20 days, identical every day
        let day = [50.0, 52.0, 58.0, 61.0, 63.0, 55.0, 40.0, 45.0, 57.0, 62.0, 60.0, 51.0];
        let values: Vec<f64> = (0..240).map(|t| day[t % 12]).collect();
        let cfg = WindowConfig {
            input_len: 4,
            horizon: 2,
            splits: SplitFractions::default(),
            time_features: true,
        };
        let ws = windows(values, 1, 7200, cfg);
        let idx = ws.indices(Split::Test);
        let pred = run_baseline(BaselineKind::HistoricalAverage, &ws, &idx).unwrap();
        let (truth, mask) = targets_kmh(&ws, &idx).unwrap();
        assert!(compute_metrics(&pred, &truth, &mask).unwrap().mae < 1e-4);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn rmse_dominates_mae(errors in proptest::collection::vec(-1e6f64..1e6, 1..50)) {
                let m = compute_metrics(&errors, &vec![0.0; errors.len()], &vec![true; errors.len()]).unwrap();
                prop_assert!(m.rmse >= m.mae);
            }
        }

        proptest! {
            #[test]
            fn masked_cells_do_not_affect_report(
                pred in proptest::collection::vec(-100f64..100.0, 12),
                noise in proptest::collection::vec(-1e9f64..1e9, 12),
                mask in proptest::collection::vec(any::<bool>(), 12),
            ) {
                prop_assume!(mask.iter().step_by(3).any(|&m| m) && mask.iter().skip(1).step_by(3).any(|&m| m) && mask.iter().skip(2).step_by(3).any(|&m| m));
                let truth = vec![1.0; 12];
                let perturbed: Vec<f64> = pred.iter().zip(&noise).zip(&mask).map(|((p, n), &m)| if m { *p } else { p + n }).collect();
                let a = compare_report(&[NamedPredictions { name: "m", values: &pred }], &truth, &mask, 3, "m", "d", 1).unwrap();
                let b = compare_report(&[NamedPredictions { name: "m", values: &perturbed }], &truth, &mask, 3, "m", "d", 1).unwrap();
                prop_assert_eq!(a.to_json(), b.to_json());
            }
        }
    }
}
