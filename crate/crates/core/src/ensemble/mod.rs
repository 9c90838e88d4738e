//! Stage-2 residual correction: tree ensembles fitted to the deep model's
//! errors on exogenous and calendar features, blended back with a single α.
//!
//! The corrected forecast is `Y_ens = Y_DL + r̂`, and the final forecast is
//! `α·Y_DL + (1−α)·Y_ens`.

mod tree;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{compute_metrics, targets_kmh};
use crate::panel::ExogTable;
use crate::preprocess::{day_fraction, Split, WindowSet};

pub use tree::{best_split, SplitChoice, Tree, TreeNode, LEAF};
use tree::{check_matrix, Builder, TreeParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    RandomForest,
    #[default]
    GradientBoosted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFraction {
    /// `max(1, ⌊√F⌋)` features per node.
    Sqrt,
    All,
}

/// Unset fields take the mode's defaults: forests use 100 trees of depth 8
/// on √F features, boosting uses 200 depth-3 trees on every feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub mode: EnsembleMode,
    pub n_trees: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub feature_frac: Option<FeatureFraction>,
    /// Forests only.
    pub bootstrap: bool,
    /// Boosting only.
    pub shrinkage: f64,
    /// Adds each exogenous variable at the target step, treating it as a
    /// known or forecast covariate, next to its value at the origin. The
    /// origin value alone says little the deep model has not already seen
    /// in its inputs.
    pub exog_at_target: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            mode: EnsembleMode::default(),
            n_trees: None,
            max_depth: None,
            min_leaf: 5,
            feature_frac: None,
            bootstrap: true,
            shrinkage: 0.1,
            exog_at_target: true,
        }
    }
}

impl EnsembleConfig {
    pub fn n_trees(&self) -> usize {
        self.n_trees.unwrap_or(match self.mode {
            EnsembleMode::RandomForest => 100,
            EnsembleMode::GradientBoosted => 200,
        })
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth.unwrap_or(match self.mode {
            EnsembleMode::RandomForest => 8,
            EnsembleMode::GradientBoosted => 3,
        })
    }

    pub fn feature_frac(&self) -> FeatureFraction {
        self.feature_frac.unwrap_or(match self.mode {
            EnsembleMode::RandomForest => FeatureFraction::Sqrt,
            EnsembleMode::GradientBoosted => FeatureFraction::All,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees() == 0 || self.min_leaf == 0 {
            return Err(Error::Validation("ensemble needs n_trees ≥ 1 and min_leaf ≥ 1".into()));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::Validation(format!(
                "shrinkage must be in (0, 1], got {}",
                self.shrinkage
            )));
        }
        Ok(())
    }
}

/// Column layout of the feature rows; fit and predict must agree on it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub names: Vec<String>,
    pub exog: Vec<String>,
    pub exog_at_target: bool,
}

impl FeatureSchema {
    pub fn new(exog: &[String], exog_at_target: bool) -> Self {
        let mut names: Vec<String> = exog.iter().map(|c| format!("{c}@origin")).collect();
        if exog_at_target {
            names.extend(exog.iter().map(|c| format!("{c}@target")));
        }
        names.extend(["hour_sin", "hour_cos"].map(String::from));
        names.extend((0..7).map(|d| format!("dow_{d}")));
        names.extend(["last_value", "y_dl", "horizon"].map(String::from));
        Self {
            names,
            exog: exog.to_vec(),
            exog_at_target,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Which target cells receive a row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellSelection {
    /// Observed cells only, with residual targets; used for fitting.
    Valid,
    /// Every cell; targets of unobserved cells are NaN. Used for prediction.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub schema: FeatureSchema,
    /// Row-major `[rows, schema.len()]`.
    pub rows: Vec<f64>,
    /// `y_true − y_DL` in km/h.
    pub targets: Vec<f64>,
    /// Flat index of each row's cell in the `[k, N, H]` prediction grid.
    pub cells: Vec<usize>,
    pub y_dl: Vec<f64>,
}

impl FeatureTable {
    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.schema.len();
        &self.rows[i * f..(i + 1) * f]
    }
}

/// Monday = 0.
pub fn day_of_week(ts: i64) -> usize {
    // 1970-01-01 was a Thursday
    (ts.div_euclid(86_400) + 3).rem_euclid(7) as usize
}

/// `(sin, cos)` of the time of day at `ts`.
pub fn hour_encoding(ts: i64) -> (f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * day_fraction(ts);
    (angle.sin(), angle.cos())
}

fn check_exog(ws: &WindowSet, exog: &ExogTable) -> Result<()> {
    let needed = ws.origins.iter().max().map_or(0, |&o| o + ws.horizon + 1);
    if exog.t0() != ws.t0 || exog.step() != ws.step || exog.len() < needed {
        return Err(Error::Schema(format!(
            "exogenous table (t0={}, step={}, len={}) does not cover the windows (t0={}, step={}, {needed} steps)",
            exog.t0(),
            exog.step(),
            exog.len(),
            ws.t0,
            ws.step
        )));
    }
    Ok(())
}

/// One row per `(sample, node, horizon step)` of `indices`, with the
/// residual of `y_dl` (km/h, `[k, N, H]`) as target.
pub fn build_feature_table(
    ws: &WindowSet,
    indices: &[usize],
    y_dl: &[f64],
    exog: Option<&ExogTable>,
    exog_at_target: bool,
    cells: CellSelection,
) -> Result<FeatureTable> {
    let (n, h) = (ws.nodes, ws.horizon);
    if y_dl.len() != indices.len() * n * h {
        return Err(Error::Dimension(format!(
            "{} deep predictions for {} samples × {n} nodes × {h} steps",
            y_dl.len(),
            indices.len()
        )));
    }
    if let Some(e) = exog {
        check_exog(ws, e)?;
    }
    let exog_names = exog.map(|e| e.names().to_vec()).unwrap_or_default();
    let schema = FeatureSchema::new(&exog_names, exog_at_target);
    let (truth, mask) = targets_kmh(ws, indices)?;
    let mut table = FeatureTable {
        schema,
        rows: Vec::new(),
        targets: Vec::new(),
        cells: Vec::new(),
        y_dl: Vec::new(),
    };
    for (k, &s) in indices.iter().enumerate() {
        let origin = ws.origins[s];
        let at_origin = exog.map(|e| e.row(origin)).unwrap_or_default();
        for node in 0..n {
            let last = ws.last_value(s, node) as f64;
            for step in 0..h {
                let cell = (k * n + node) * h + step;
                if cells == CellSelection::Valid && !mask[cell] {
                    continue;
                }
                let target_t = origin + step + 1;
                let ts = ws.t0 + target_t as i64 * ws.step;
                table.rows.extend_from_slice(&at_origin);
                if exog_at_target {
                    if let Some(e) = exog {
                        table.rows.extend(e.row(target_t));
                    }
                }
                let (hs, hc) = hour_encoding(ts);
                table.rows.extend([hs, hc]);
                let dow = day_of_week(ts);
                table.rows.extend((0..7).map(|d| if d == dow { 1.0 } else { 0.0 }));
                table.rows.extend([last, y_dl[cell], (step + 1) as f64]);
                table
                    .targets
                    .push(if mask[cell] { truth[cell] - y_dl[cell] } else { f64::NAN });
                table.cells.push(cell);
                table.y_dl.push(y_dl[cell]);
            }
        }
    }
    if table.rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("feature rows must be finite".into()));
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub mode: EnsembleMode,
    pub trees: Vec<Tree>,
    /// Starting value of boosting; 0 for forests.
    pub base: f64,
    /// Boosting step applied to every tree; 1 for forests.
    pub shrinkage: f64,
    pub schema: FeatureSchema,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    /// Total split gain per feature, summed over trees.
    pub importance: Vec<f64>,
}

/// Sum in a fixed pairwise pattern.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

impl EnsembleModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Corrupt(format!("α = {} outside [0, 1]", self.alpha)));
        }
        if self.trees.is_empty() || self.seeds.len() != self.trees.len() {
            return Err(Error::Corrupt("ensemble trees and seeds disagree".into()));
        }
        if !self.base.is_finite() || !self.shrinkage.is_finite() {
            return Err(Error::Corrupt("ensemble base or shrinkage is not finite".into()));
        }
        self.trees.iter().try_for_each(|t| t.validate(self.schema.len()))
    }

    /// Residual estimate for one feature row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self.mode {
            EnsembleMode::RandomForest => {
                // sorting first makes the mean independent of tree order
                let mut p: Vec<f64> = self.trees.iter().map(|t| t.predict(row)).collect();
                p.sort_by(f64::total_cmp);
                pairwise_sum(&p) / p.len() as f64
            }
            EnsembleMode::GradientBoosted => self
                .trees
                .iter()
                .fold(self.base, |acc, t| acc + self.shrinkage * t.predict(row)),
        }
    }

    pub fn predict_residuals(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        if table.schema != self.schema {
            return Err(Error::Schema(format!(
                "feature schema {:?} does not match the fitted {:?}",
                table.schema.names, self.schema.names
            )));
        }
        Ok((0..table.n_rows()).map(|i| self.predict_row(table.row(i))).collect())
    }
}

fn tree_params(cfg: &EnsembleConfig, nf: usize) -> TreeParams {
    TreeParams {
        max_depth: cfg.max_depth(),
        min_leaf: cfg.min_leaf,
        features_per_node: match cfg.feature_frac() {
            FeatureFraction::Sqrt => Some(((nf as f64).sqrt().floor() as usize).max(1)),
            FeatureFraction::All => None,
        },
    }
}

/// Fits trees to the table's residual targets; α starts at 1.
///
/// Forest trees use seed `seed + i` and may be grown in parallel; boosting
/// is sequential. Either way the result depends only on the seed.
pub fn fit_ensemble(table: &FeatureTable, cfg: &EnsembleConfig, seed: u64) -> Result<EnsembleModel> {
    cfg.validate()?;
    let nf = table.schema.len();
    if table.n_rows() == 0 {
        return Err(Error::Validation("cannot fit an ensemble on an empty table".into()));
    }
    check_matrix(&table.rows, nf, &table.targets)?;
    let (x, y) = (&table.rows, &table.targets);
    let n = y.len();
    let params = tree_params(cfg, nf);
    let n_trees = cfg.n_trees();
    let seeds: Vec<u64> = (0..n_trees as u64).map(|i| seed.wrapping_add(i)).collect();
    let mut importance = vec![0.0; nf];
    let (trees, base, shrinkage) = match cfg.mode {
        EnsembleMode::RandomForest => {
            let grown: Vec<(Tree, Vec<f64>)> = seeds
                .par_iter()
                .map(|&s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let samples: Vec<u32> = if cfg.bootstrap {
                        (0..n).map(|_| rng.random_range(0..n as u32)).collect()
                    } else {
                        (0..n as u32).collect()
                    };
                    let mut b = Builder::new(x, nf, y, samples);
                    let t = b.build(&params, &mut rng);
                    (t, b.importance)
                })
                .collect();
            let mut trees = Vec::with_capacity(n_trees);
            for (t, imp) in grown {
                importance.iter_mut().zip(&imp).for_each(|(a, b)| *a += b);
                trees.push(t);
            }
            (trees, 0.0, 1.0)
        }
        EnsembleMode::GradientBoosted => {
            let base = y.iter().sum::<f64>() / n as f64;
            let mut pred = vec![base; n];
            let mut resid = vec![0.0; n];
            let template = Builder::new(x, nf, y, (0..n as u32).collect());
            let mut trees = Vec::with_capacity(n_trees);
            for &s in &seeds {
                resid.iter_mut().zip(y).zip(&pred).for_each(|((r, t), p)| *r = t - p);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut b = template.retarget(&resid);
                let t = b.build(&params, &mut rng);
                importance.iter_mut().zip(&b.importance).for_each(|(a, b)| *a += b);
                for (i, p) in pred.iter_mut().enumerate() {
                    *p += cfg.shrinkage * t.predict(&x[i * nf..(i + 1) * nf]);
                }
                trees.push(t);
            }
            (trees, base, cfg.shrinkage)
        }
    };
    Ok(EnsembleModel {
        mode: cfg.mode,
        trees,
        base,
        shrinkage,
        schema: table.schema.clone(),
        alpha: 1.0,
        seeds,
        importance,
    })
}

/// `Y_ens = Y_DL + r̂` for every row of the table.
pub fn predict_corrected(model: &EnsembleModel, table: &FeatureTable) -> Result<Vec<f64>> {
    let r = model.predict_residuals(table)?;
    Ok(table.y_dl.iter().zip(&r).map(|(d, r)| d + r).collect())
}

/// Writes per-row values back into a copy of the full `[k, N, H]` grid;
/// cells without a row keep their value from `base`.
pub fn scatter(table: &FeatureTable, base: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if values.len() != table.n_rows() || table.cells.iter().any(|&c| c >= base.len()) {
        return Err(Error::Dimension("row values do not fit the prediction grid".into()));
    }
    let mut out = base.to_vec();
    for (&c, &v) in table.cells.iter().zip(values) {
        out[c] = v;
    }
    Ok(out)
}

/// Grid step for α.
pub const ALPHA_STEPS: usize = 20;

const ALPHA_TIE_TOL: f64 = 1e-12;

/// α on `{0, 0.05, …, 1}` minimizing the masked MAE of the blend; ties
/// go to the larger α, so a useless ensemble leaves the deep forecast alone.
pub fn select_alpha(y_dl: &[f64], y_ens: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    if y_dl.len() != y_ens.len() {
        return Err(Error::Dimension(format!(
            "{} deep and {} corrected predictions",
            y_dl.len(),
            y_ens.len()
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    for k in (0..=ALPHA_STEPS).rev() {
        let alpha = k as f64 / ALPHA_STEPS as f64;
        let blend = fuse_predictions(y_dl, y_ens, alpha)?;
        let mae = compute_metrics(&blend, truth, mask)?.mae;
        // differences at rounding level count as ties
        if best.is_none_or(|(_, m)| mae < m - ALPHA_TIE_TOL * m.max(1.0)) {
            best = Some((alpha, mae));
        }
    }
    Ok(best.expect("grid is not empty").0)
}

/// `α·Y_DL + (1−α)·Y_ens`, elementwise.
pub fn fuse_predictions(y_dl: &[f64], y_ens: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("α must lie in [0, 1], got {alpha}")));
    }
    if y_dl.len() != y_ens.len() {
        return Err(Error::Dimension(format!(
            "{} deep and {} corrected predictions",
            y_dl.len(),
            y_ens.len()
        )));
    }
    Ok(y_dl
        .iter()
        .zip(y_ens)
        .map(|(d, e)| alpha * d + (1.0 - alpha) * e)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub fit_samples: usize,
    pub fit_rows: usize,
    pub select_samples: usize,
    pub alpha: f64,
    pub select_mae_dl: f64,
    pub select_mae_ens: f64,
    pub select_mae_final: f64,
    pub importance: Vec<(String, f64)>,
}

/// Fits the ensemble on the first half of the validation samples and picks
/// α on the second half. `y_dl_val` holds the deep forecasts in km/h for
/// `ws.indices(Split::Val)`, in order.
pub fn train_stage2(
    ws: &WindowSet,
    y_dl_val: &[f64],
    exog: Option<&ExogTable>,
    cfg: &EnsembleConfig,
    seed: u64,
) -> Result<(EnsembleModel, Stage2Report)> {
    let val = ws.indices(Split::Val);
    let cell = ws.nodes * ws.horizon;
    if y_dl_val.len() != val.len() * cell {
        return Err(Error::Dimension(format!(
            "{} validation predictions for {} samples",
            y_dl_val.len(),
            val.len()
        )));
    }
    let half = val.len() / 2;
    if half == 0 {
        return Err(Error::Validation(
            "need at least 2 validation samples for stage 2".into(),
        ));
    }
    let (fit_idx, sel_idx) = val.split_at(half);
    let (fit_dl, sel_dl) = y_dl_val.split_at(half * cell);
    let table = build_feature_table(ws, fit_idx, fit_dl, exog, cfg.exog_at_target, CellSelection::Valid)?;
    let mut model = fit_ensemble(&table, cfg, seed)?;
    let sel_ens = correct_grid(&model, ws, sel_idx, sel_dl, exog)?;
    let (truth, mask) = targets_kmh(ws, sel_idx)?;
    let alpha = select_alpha(sel_dl, &sel_ens, &truth, &mask)?;
    model.alpha = alpha;
    let fin = fuse_predictions(sel_dl, &sel_ens, alpha)?;
    let report = Stage2Report {
        fit_samples: fit_idx.len(),
        fit_rows: table.n_rows(),
        select_samples: sel_idx.len(),
        alpha,
        select_mae_dl: compute_metrics(sel_dl, &truth, &mask)?.mae,
        select_mae_ens: compute_metrics(&sel_ens, &truth, &mask)?.mae,
        select_mae_final: compute_metrics(&fin, &truth, &mask)?.mae,
        importance: model
            .schema
            .names
            .iter()
            .cloned()
            .zip(model.importance.iter().copied())
            .collect(),
    };
    Ok((model, report))
}

/// `Y_ens` over the full `[k, N, H]` grid of `indices`.
pub fn correct_grid(
    model: &EnsembleModel,
    ws: &WindowSet,
    indices: &[usize],
    y_dl: &[f64],
    exog: Option<&ExogTable>,
) -> Result<Vec<f64>> {
    let table = build_feature_table(ws, indices, y_dl, exog, model.schema.exog_at_target, CellSelection::All)?;
    let ens = predict_corrected(model, &table)?;
    scatter(&table, y_dl, &ens)
}

/// `(Y_ens, Y_final)` for `indices` using the model's stored α.
pub fn apply_stage2(
    model: &EnsembleModel,
    ws: &WindowSet,
    indices: &[usize],
    y_dl: &[f64],
    exog: Option<&ExogTable>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ens = correct_grid(model, ws, indices, y_dl, exog)?;
    let fin = fuse_predictions(y_dl, &ens, model.alpha)?;
    Ok((ens, fin))
}
