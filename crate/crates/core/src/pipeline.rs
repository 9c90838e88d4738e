//! Stage glue shared by the command-line tool and the tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnum::Tensor;
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::graph::{
    adjacency_from_correlation, adjacency_from_distance, KernelSigma, SensorGraph, DEFAULT_DISTANCE_THRESHOLD,
    DEFAULT_TOP_K,
};
use crate::hybrid::{ModelConfig, TrainConfig};
use crate::panel::SeriesPanel;
use crate::preprocess::{
    apply_normalizer, fit_normalizer, flag_outliers, impute_gaps, make_windows, Direction, SplitPlan, WindowConfig,
    WindowSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Centered, so it must be odd: 13 steps is one hour either side of 5-min data.
    pub outlier_window: usize,
    pub z_max: f64,
    pub max_interp_len: usize,
    pub windows: WindowConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            outlier_window: 13,
            z_max: 3.0,
            max_interp_len: 6,
            windows: WindowConfig::default(),
        }
    }
}

/// Summary of what cleaning did, for logs and reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub cells: usize,
    pub missing: usize,
    pub outliers: usize,
}

/// Outlier flagging, imputation, train-only normalization and windowing.
///
/// Every fitted quantity looks only at `[0, train_end)`, and cleaning never
/// crosses a split boundary, so later data cannot reach training tensors.
pub fn preprocess(
    panel: &SeriesPanel,
    graph: &SensorGraph,
    cfg: &PreprocessConfig,
) -> Result<(WindowSet, PreprocessStats)> {
    if !cfg.z_max.is_finite() || cfg.z_max <= 0.0 {
        return Err(Error::Validation(format!("z_max must be positive, got {}", cfg.z_max)));
    }
    graph.check_matches(panel)?;
    let w = &cfg.windows;
    let plan = SplitPlan::new(panel.len(), w.input_len, w.horizon, w.splits)?;
    let cuts = plan.cuts();
    let flagged = flag_outliers(panel, cfg.outlier_window, cfg.z_max, &cuts)?;
    let train_end = plan.train_end();
    let filled = impute_gaps(&flagged, graph, cfg.max_interp_len, train_end, &cuts)?;
    let norm = fit_normalizer(&filled, 0..train_end)?;
    let scaled = apply_normalizer(&filled, &norm, Direction::Forward)?;
    let mut ws = make_windows(&scaled, w)?;
    ws.norm = Some(norm);
    ws.provenance = serde_json::to_string(cfg).expect("config serializes");
    let missing = panel.mask().iter().filter(|&&m| !m).count();
    let stats = PreprocessStats {
        cells: panel.mask().len(),
        missing,
        outliers: flagged.mask().iter().filter(|&&m| !m).count() - missing,
    };
    Ok((ws, stats))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    /// Gaussian kernel over road distances.
    #[default]
    Distance,
    /// Top-k Pearson correlation over the training range.
    Correlation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub source: GraphSource,
    pub sigma: KernelSigma,
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            source: GraphSource::Distance,
            sigma: KernelSigma::Auto,
            threshold: DEFAULT_DISTANCE_THRESHOLD,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// Builds the sensor graph; correlation graphs only look at the training range.
pub fn build_graph(
    cfg: &GraphConfig,
    panel: &SeriesPanel,
    distances: Option<&Tensor>,
    windows: &WindowConfig,
) -> Result<SensorGraph> {
    match cfg.source {
        GraphSource::Distance => {
            let d = distances.ok_or_else(|| Error::Validation("distance graphs need a distance file".into()))?;
            adjacency_from_distance(panel.sensor_ids().to_vec(), d, cfg.sigma, cfg.threshold)
        }
        GraphSource::Correlation => {
            let plan = SplitPlan::new(panel.len(), windows.input_len, windows.horizon, windows.splits)?;
            adjacency_from_correlation(panel, plan.train_end(), cfg.top_k)
        }
    }
}

/// Every tunable of a run. Sections fall back to their defaults; the seed
/// has none and must be given. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            preprocess: PreprocessConfig::default(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Effective config with every default filled in, as compact JSON.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory_and_unknown_keys_fail() {
        assert!(RunConfig::from_json("{}").is_err());
        let c = RunConfig::from_json(r#"{"seed": 3}"#).unwrap();
        assert_eq!(c, RunConfig::with_seed(3));
        assert!(RunConfig::from_json(r#"{"seed": 3, "modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 3, "train": {"epochs": 5}}"#).is_err());
        let c = RunConfig::from_json(
            r#"{"seed": 1, "model": {"variant": "gcn_only"}, "ensemble": {"mode": "random_forest"}}"#,
        )
        .unwrap();
        assert_eq!(c.model.variant, crate::hybrid::Variant::GcnOnly);
        assert_eq!(c.ensemble.n_trees(), 100);
    }

    #[test]
    fn canonical_json_round_trips() {
        let mut c = RunConfig::with_seed(9);
        c.graph.sigma = KernelSigma::Fixed(1000.0);
        c.train.adam.lr = 0.003;
        let back = RunConfig::from_json(&c.canonical_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical_json(), c.canonical_json());
    }
}
