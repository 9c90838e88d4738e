//! Cleaning, imputation, leak-free normalization and windowing.
//!
//! The chronological split is planned first ([`SplitPlan`]) so every stage
//! can respect it: outlier windows and interpolation never reach across a
//! split boundary, and fitted statistics only read the training range.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::panel::SeriesPanel;

pub const NORM_EPS: f64 = 1e-8;
const MAD_SCALE: f64 = 1.4826;
const ROBUST_EPS: f64 = 1e-8;
const SECONDS_PER_DAY: i64 = 86_400;

const DATASET_MAGIC: &[u8; 4] = b"HSTW";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Corrupt(format!("unknown split label {c}"))),
        }
    }
}

/// Sample counts per split and the step ranges each split reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub input_len: usize,
    pub horizon: usize,
    pub samples: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl SplitPlan {
    pub fn new(len: usize, input_len: usize, horizon: usize, fractions: SplitFractions) -> Result<Self> {
        if input_len == 0 || horizon == 0 {
            return Err(Error::Validation("input length and horizon must be positive".into()));
        }
        if len < input_len + horizon {
            return Err(Error::Validation(format!(
                "series of {len} steps is shorter than T + H = {}",
                input_len + horizon
            )));
        }
        let total = fractions.train + fractions.val + fractions.test;
        if fractions.train <= 0.0 || fractions.val < 0.0 || fractions.test < 0.0 || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "split fractions {fractions:?} must be nonnegative and sum to 1"
            )));
        }
        let samples = len - input_len - horizon + 1;
        // the nudge keeps exact products such as 0.7·30 from flooring down
        let n_train = (fractions.train * samples as f64 + 1e-9).floor() as usize;
        let n_val = ((fractions.val * samples as f64 + 1e-9).floor() as usize).min(samples - n_train);
        Ok(Self {
            input_len,
            horizon,
            samples,
            n_train,
            n_val,
            n_test: samples - n_train - n_val,
        })
    }

    pub fn split_of(&self, sample: usize) -> Split {
        if sample < self.n_train {
            Split::Train
        } else if sample < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn origin(&self, sample: usize) -> usize {
        sample + self.input_len - 1
    }

    /// First step not read by any training sample (input or target).
    pub fn train_end(&self) -> usize {
        self.input_len - 1 + self.n_train + self.horizon
    }

    /// First step not read by any training or validation sample.
    pub fn val_end(&self) -> usize {
        self.input_len - 1 + self.n_train + self.n_val + self.horizon
    }

    /// Split boundaries that preprocessing must not cross.
    pub fn cuts(&self) -> Vec<usize> {
        vec![self.train_end(), self.val_end()]
    }
}

fn segments(len: usize, cuts: &[usize]) -> Vec<Range<usize>> {
    let mut bounds: Vec<usize> = cuts.iter().copied().filter(|&c| c > 0 && c < len).collect();
    bounds.sort_unstable();
    bounds.dedup();
    let mut out = Vec::with_capacity(bounds.len() + 1);
    let mut start = 0;
    for b in bounds {
        out.push(start..b);
        start = b;
    }
    out.push(start..len);
    out
}

fn median_of(buf: &mut [f64]) -> f64 {
    buf.sort_by(f64::total_cmp);
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        0.5 * (buf[n / 2 - 1] + buf[n / 2])
    }
}

/// Flags cells whose robust z-score within a centered window exceeds
/// `z_max`, repeating until no new cell is flagged.
///
/// `z = |x − median| / (1.4826·MAD + 1e-8)` over the valid cells of the
/// window, clipped to the split segment containing the cell. Flagged cells
/// keep their values and lose their mask bit; cells already invalid stay so.
pub fn flag_outliers(panel: &SeriesPanel, window: usize, z_max: f64, cuts: &[usize]) -> Result<SeriesPanel> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "outlier window must be odd and ≥ 3, got {window}"
        )));
    }
    let half = window / 2;
    let len = panel.len();
    let segs = segments(len, cuts);
    let mut mask = panel.mask().to_vec();
    let mut buf = Vec::with_capacity(window);
    let mut dev = Vec::with_capacity(window);
    loop {
        let mut flagged = Vec::new();
        for s in 0..panel.n_sensors() {
            let row = panel.row(s);
            let m = &mask[s * len..(s + 1) * len];
            for seg in &segs {
                for t in seg.clone() {
                    if !m[t] {
                        continue;
                    }
                    let lo = t.saturating_sub(half).max(seg.start);
                    let hi = (t + half + 1).min(seg.end);
                    buf.clear();
                    buf.extend((lo..hi).filter(|&u| m[u]).map(|u| row[u]));
                    if buf.len() < 3 {
                        continue;
                    }
                    let med = median_of(&mut buf);
                    dev.clear();
                    dev.extend(buf.iter().map(|x| (x - med).abs()));
                    let mad = median_of(&mut dev);
                    let z = (row[t] - med).abs() / (MAD_SCALE * mad + ROBUST_EPS);
                    if z > z_max {
                        flagged.push(s * len + t);
                    }
                }
            }
        }
        if flagged.is_empty() {
            break;
        }
        for i in flagged {
            mask[i] = false;
        }
    }
    let mut out = panel.clone();
    out.set_mask(mask);
    Ok(out)
}

/// Fills invalid cells so window tensors are dense; the mask is unchanged,
/// so filled cells stay excluded from losses and metrics.
///
/// Gaps of at most `max_interp_len` steps bounded by valid cells in the same
/// split segment are interpolated linearly. Other cells take the `Â`-weighted
/// mean of neighbors observed at the same step, and failing that the
/// sensor's mean over `[0, train_end)`.
pub fn impute_gaps(
    panel: &SeriesPanel,
    graph: &SensorGraph,
    max_interp_len: usize,
    train_end: usize,
    cuts: &[usize],
) -> Result<SeriesPanel> {
    graph.check_matches(panel)?;
    let (n, len) = (panel.n_sensors(), panel.len());
    let a_hat = graph.normalized();
    let train_end = train_end.min(len);
    let mut out = panel.clone();
    let segs = segments(len, cuts);
    for s in 0..n {
        let mask = panel.mask_row(s);
        if !mask.iter().any(|&m| m) {
            return Err(Error::Validation(format!(
                "sensor {} has no valid observations; nothing to impute from",
                panel.sensor_ids()[s]
            )));
        }
        let train_mean = {
            let vals: Vec<f64> = (0..train_end).filter(|&t| mask[t]).map(|t| panel.value(s, t)).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let mut fills: Vec<(usize, f64)> = Vec::new();
        for seg in &segs {
            let mut t = seg.start;
            while t < seg.end {
                if mask[t] {
                    t += 1;
                    continue;
                }
                let start = t;
                while t < seg.end && !mask[t] {
                    t += 1;
                }
                let end = t;
                let gap = end - start;
                let bounded = start > seg.start && end < seg.end;
                if bounded && gap <= max_interp_len {
                    let a = panel.value(s, start - 1);
                    let b = panel.value(s, end);
                    for (k, u) in (start..end).enumerate() {
                        let frac = (k + 1) as f64 / (gap + 1) as f64;
                        fills.push((u, a + (b - a) * frac));
                    }
                    continue;
                }
                for u in start..end {
                    let (mut num, mut den) = (0.0, 0.0);
                    for j in 0..n {
                        let w = a_hat.at(s, j);
                        if j != s && w > 0.0 && panel.is_valid(j, u) {
                            num += w * panel.value(j, u);
                            den += w;
                        }
                    }
                    let v = if den > 0.0 {
                        num / den
                    } else {
                        train_mean.ok_or_else(|| {
                            Error::Validation(format!(
                                "sensor {} has no training observations to fall back on at step {u}",
                                panel.sensor_ids()[s]
                            ))
                        })?
                    };
                    fills.push((u, v));
                }
            }
        }
        let row = &mut out.values_mut()[s * len..(s + 1) * len];
        for (u, v) in fills {
            row[u] = v;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub sensor_ids: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fitted_on: (usize, usize),
}

impl NormStats {
    pub fn denormalize(&self, sensor: usize, z: f64) -> f64 {
        z * self.std[sensor] + self.mean[sensor]
    }

    pub fn normalize(&self, sensor: usize, x: f64) -> f64 {
        (x - self.mean[sensor]) / self.std[sensor]
    }
}

/// Per-sensor mean and population std over valid cells in `range`.
pub fn fit_normalizer(panel: &SeriesPanel, range: Range<usize>) -> Result<NormStats> {
    if range.end > panel.len() || range.start >= range.end {
        return Err(Error::Validation(format!(
            "normalizer range {range:?} invalid for {} steps",
            panel.len()
        )));
    }
    let mut mean = Vec::with_capacity(panel.n_sensors());
    let mut std = Vec::with_capacity(panel.n_sensors());
    for s in 0..panel.n_sensors() {
        let vals: Vec<f64> = range
            .clone()
            .filter(|&t| panel.is_valid(s, t))
            .map(|t| panel.value(s, t))
            .collect();
        if vals.len() < 2 {
            return Err(Error::Validation(format!(
                "sensor {} has {} valid training points, need at least 2",
                panel.sensor_ids()[s],
                vals.len()
            )));
        }
        let k = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / k;
        let var = vals.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / k;
        mean.push(mu);
        std.push(var.sqrt().max(NORM_EPS));
    }
    Ok(NormStats {
        sensor_ids: panel.sensor_ids().to_vec(),
        mean,
        std,
        fitted_on: (range.start, range.end),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

pub fn apply_normalizer(panel: &SeriesPanel, stats: &NormStats, direction: Direction) -> Result<SeriesPanel> {
    if stats.sensor_ids != panel.sensor_ids() {
        return Err(Error::Schema("normalizer sensors do not match the panel".into()));
    }
    let len = panel.len();
    let mut out = panel.clone();
    for (s, row) in out.values_mut().chunks_mut(len).enumerate() {
        let (mu, sd) = (stats.mean[s], stats.std[s]);
        for v in row.iter_mut() {
            *v = match direction {
                Direction::Forward => (*v - mu) / sd,
                Direction::Inverse => sd * *v + mu,
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub splits: SplitFractions,
    /// Adds sin/cos time-of-day channels after the reading.
    pub time_features: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            input_len: 12,
            horizon: 3,
            splits: SplitFractions::default(),
            time_features: true,
        }
    }
}

impl WindowConfig {
    pub fn features(&self) -> usize {
        if self.time_features {
            3
        } else {
            1
        }
    }
}

/// Fraction of the day elapsed at `ts`, in `[0, 1)`.
pub fn day_fraction(ts: i64) -> f64 {
    ts.rem_euclid(SECONDS_PER_DAY) as f64 / SECONDS_PER_DAY as f64
}

/// Supervised samples cut from a normalized, imputed panel.
///
/// Tensors are stored in f32, exactly as they are serialized.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub samples: usize,
    pub nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub features: usize,
    /// `[S, N, T, F]`
    pub inputs: Vec<f32>,
    /// `[S, N, H]`
    pub targets: Vec<f32>,
    pub target_mask: Vec<bool>,
    pub origins: Vec<usize>,
    pub splits: Vec<Split>,
    pub sensor_ids: Vec<String>,
    pub t0: i64,
    pub step: i64,
    pub norm: Option<NormStats>,
    /// Canonical JSON of the settings that produced the set.
    pub provenance: String,
}

impl WindowSet {
    pub fn input(&self, s: usize) -> &[f32] {
        let k = self.nodes * self.input_len * self.features;
        &self.inputs[s * k..(s + 1) * k]
    }

    pub fn target(&self, s: usize) -> &[f32] {
        let k = self.nodes * self.horizon;
        &self.targets[s * k..(s + 1) * k]
    }

    pub fn mask(&self, s: usize) -> &[bool] {
        let k = self.nodes * self.horizon;
        &self.target_mask[s * k..(s + 1) * k]
    }

    /// Normalized reading of `node` at the origin step of sample `s`.
    pub fn last_value(&self, s: usize, node: usize) -> f32 {
        let base = ((s * self.nodes + node) * self.input_len + self.input_len - 1) * self.features;
        self.inputs[base]
    }

    pub fn origin_timestamp(&self, s: usize) -> i64 {
        self.t0 + self.step * self.origins[s] as i64
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples).filter(|&s| self.splits[s] == split).collect()
    }

    pub fn norm(&self) -> Result<&NormStats> {
        self.norm
            .as_ref()
            .ok_or_else(|| Error::Schema("window set carries no normalization statistics".into()))
    }
}

/// Cuts every `(T input, H target)` window from `panel`.
///
/// Sample `s` has origin `t = s + T − 1`, inputs at steps `[t−T+1, t]` and
/// targets at `[t+1, t+H]`. Splits are assigned chronologically by origin.
pub fn make_windows(panel: &SeriesPanel, cfg: &WindowConfig) -> Result<WindowSet> {
    let plan = SplitPlan::new(panel.len(), cfg.input_len, cfg.horizon, cfg.splits)?;
    let (n, t_in, h, f) = (panel.n_sensors(), cfg.input_len, cfg.horizon, cfg.features());
    let s_total = plan.samples;
    let mut inputs = Vec::with_capacity(s_total * n * t_in * f);
    let mut targets = Vec::with_capacity(s_total * n * h);
    let mut target_mask = Vec::with_capacity(s_total * n * h);
    let time: Vec<(f64, f64)> = (0..panel.len())
        .map(|t| {
            let angle = 2.0 * std::f64::consts::PI * day_fraction(panel.timestamp(t));
            (angle.sin(), angle.cos())
        })
        .collect();
    for s in 0..s_total {
        let origin = plan.origin(s);
        for node in 0..n {
            #[allow(clippy::needless_range_loop)]
            for u in (origin + 1 - t_in)..=origin {
                let v = panel.value(node, u);
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "sensor {} has no value at step {u}; impute before windowing",
                        panel.sensor_ids()[node]
                    )));
                }
                inputs.push(v as f32);
                if cfg.time_features {
                    inputs.push(time[u].0 as f32);
                    inputs.push(time[u].1 as f32);
                }
            }
        }
        for node in 0..n {
            for u in (origin + 1)..=(origin + h) {
                let valid = panel.is_valid(node, u);
                let v = panel.value(node, u);
                targets.push(if v.is_finite() { v as f32 } else { 0.0 });
                target_mask.push(valid);
            }
        }
    }
    Ok(WindowSet {
        samples: s_total,
        nodes: n,
        input_len: t_in,
        horizon: h,
        features: f,
        inputs,
        targets,
        target_mask,
        origins: (0..s_total).map(|s| plan.origin(s)).collect(),
        splits: (0..s_total).map(|s| plan.split_of(s)).collect(),
        sensor_ids: panel.sensor_ids().to_vec(),
        t0: panel.t0(),
        step: panel.step(),
        norm: None,
        provenance: "{}".into(),
    })
}

/// Writes the `HSTW` dataset file.
///
/// Layout after the magic and u32 version: u64 dims `S N T H F`, i64 t0,
/// i64 step, N sensor ids, f32 inputs, f32 targets, f32 target mask (0/1),
/// u64 origins, u8 split labels,
/// u8 norm flag then per-sensor `(mean, std)` f64 pairs and the u64 fitted
/// range, and finally the provenance JSON (u64 length + bytes).
pub fn store_windows(ws: &WindowSet, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    for d in [ws.samples, ws.nodes, ws.input_len, ws.horizon, ws.features] {
        w.u64(d as u64);
    }
    w.i64(ws.t0);
    w.i64(ws.step);
    for id in &ws.sensor_ids {
        w.str(id);
    }
    ws.inputs.iter().for_each(|&v| w.f32(v));
    ws.targets.iter().for_each(|&v| w.f32(v));
    ws.target_mask.iter().for_each(|&m| w.f32(if m { 1.0 } else { 0.0 }));
    ws.origins.iter().for_each(|&o| w.u64(o as u64));
    ws.splits.iter().for_each(|s| w.u8(s.code()));
    match &ws.norm {
        Some(stats) => {
            w.u8(1);
            for (m, s) in stats.mean.iter().zip(&stats.std) {
                w.f64(*m);
                w.f64(*s);
            }
            w.u64(stats.fitted_on.0 as u64);
            w.u64(stats.fitted_on.1 as u64);
        }
        None => w.u8(0),
    }
    w.u64(ws.provenance.len() as u64);
    w.bytes(ws.provenance.as_bytes());
    w.write_to(path)
}

pub fn load_windows(path: &Path) -> Result<WindowSet> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, "dataset");
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Incompatible(format!(
            "dataset version {version}, this build reads {DATASET_VERSION}"
        )));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = r.u64()? as usize;
    }
    let [samples, nodes, input_len, horizon, features] = dims;
    let t0 = r.i64()?;
    let step = r.i64()?;
    let sensor_ids = (0..nodes).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let n_in = r.len(4, (samples as u64) * (nodes * input_len * features) as u64)?;
    let inputs = r.f32s(n_in)?;
    let n_tg = r.len(4, (samples as u64) * (nodes * horizon) as u64)?;
    let targets = r.f32s(n_tg)?;
    let target_mask = r.f32s(n_tg)?.into_iter().map(|v| v != 0.0).collect();
    let origins = (0..r.len(8, samples as u64)?)
        .map(|_| r.u64().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let splits = (0..samples)
        .map(|_| Split::from_code(r.u8()?))
        .collect::<Result<Vec<_>>>()?;
    let norm = match r.u8()? {
        0 => None,
        1 => {
            let mut mean = Vec::with_capacity(nodes);
            let mut std = Vec::with_capacity(nodes);
            for _ in 0..r.len(16, nodes as u64)? {
                mean.push(r.f64()?);
                std.push(r.f64()?);
            }
            let fitted_on = (r.u64()? as usize, r.u64()? as usize);
            Some(NormStats {
                sensor_ids: sensor_ids.clone(),
                mean,
                std,
                fitted_on,
            })
        }
        f => return Err(Error::Corrupt(format!("bad normalization flag {f}"))),
    };
    let plen = r.u64()? as usize;
    let provenance =
        String::from_utf8(r.take(plen)?.to_vec()).map_err(|_| Error::Corrupt("provenance is not UTF-8".into()))?;
    r.finish()?;
    Ok(WindowSet {
        samples,
        nodes,
        input_len,
        horizon,
        features,
        inputs,
        targets,
        target_mask,
        origins,
        splits,
        sensor_ids,
        t0,
        step,
        norm,
        provenance,
    })
}
