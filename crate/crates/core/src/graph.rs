//! Sensor graph construction and symmetric renormalization.
//!
//! Two builders produce the raw weight matrix `A`: a Gaussian kernel over
//! road distances, and absolute Pearson correlation over the training
//! range. Both finish through [`normalize_adjacency`], which returns
//! `Â = D^{-1/2}(A+I)D^{-1/2}` with `D` the row sums of `A+I`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::panel::{write_text, SeriesPanel};

const GRAPH_MAGIC: &[u8; 4] = b"HSTG";
const GRAPH_VERSION: u32 = 1;

pub const DEFAULT_DISTANCE_THRESHOLD: f64 = 0.1;
pub const DEFAULT_TOP_K: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    node_ids: Vec<String>,
    adjacency: Tensor,
    normalized: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSigma {
    /// Population std of the finite off-diagonal distances.
    Auto,
    Fixed(f64),
}

impl SensorGraph {
    /// Validates `adjacency` (symmetric, nonnegative, zero diagonal) and
    /// computes its normalized form.
    pub fn from_adjacency(node_ids: Vec<String>, adjacency: Tensor) -> Result<Self> {
        let n = node_ids.len();
        if adjacency.shape() != [n, n] {
            return Err(Error::Dimension(format!(
                "{n} node ids for adjacency {:?}",
                adjacency.shape()
            )));
        }
        for i in 0..n {
            if adjacency.at(i, i) != 0.0 {
                return Err(Error::Validation(format!("adjacency diagonal at {i} is nonzero")));
            }
            for j in 0..n {
                if adjacency.at(i, j) != adjacency.at(j, i) {
                    return Err(Error::Validation(format!("adjacency not symmetric at ({i}, {j})")));
                }
            }
        }
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(Self {
            node_ids,
            adjacency,
            normalized,
        })
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    pub fn check_matches(&self, panel: &SeriesPanel) -> Result<()> {
        if self.node_ids != panel.sensor_ids() {
            return Err(Error::Schema(
                "graph node ids do not match the panel's sensor ids".into(),
            ));
        }
        Ok(())
    }
}

/// `Â = D^{-1/2}(A+I)D^{-1/2}`.
///
/// Entry `(i, j)` is computed as `a_ij · (s_i · s_j)` with `s = 1/√d`, so
/// the result is bit-symmetric whenever `A` is.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let n = a.shape()[0];
    if a.shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "adjacency must be square, got {:?}",
            a.shape()
        )));
    }
    if let Some(pos) = a.data().iter().position(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Validation(format!(
            "adjacency entry ({}, {}) = {} is negative or not finite",
            pos / n,
            pos % n,
            a.data()[pos]
        )));
    }
    let with_self = |i: usize, j: usize| a.at(i, j) + if i == j { 1.0 } else { 0.0 };
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = (0..n).map(|j| with_self(i, j)).sum();
            1.0 / deg.sqrt()
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = with_self(i, j) * (inv_sqrt[i] * inv_sqrt[j]);
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Gaussian-kernel graph from a road distance matrix. Infinite distances
/// mean "no road link" and map to weight 0.
pub fn adjacency_from_distance(
    node_ids: Vec<String>,
    distances: &Tensor,
    sigma: KernelSigma,
    threshold: f64,
) -> Result<SensorGraph> {
    let n = node_ids.len();
    if distances.shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "{n} node ids for distance matrix {:?}",
            distances.shape()
        )));
    }
    let mut finite_off = Vec::new();
    for i in 0..n {
        if distances.at(i, i) != 0.0 {
            return Err(Error::Validation(format!("distance diagonal at {i} is nonzero")));
        }
        for j in 0..n {
            let d = distances.at(i, j);
            if d.is_nan() || d < 0.0 {
                return Err(Error::Validation(format!("distance ({i}, {j}) = {d} is invalid")));
            }
            if d != distances.at(j, i) {
                return Err(Error::Validation(format!(
                    "distance matrix not symmetric at ({i}, {j})"
                )));
            }
            if i != j && d.is_finite() {
                finite_off.push(d);
            }
        }
    }
    let sigma = match sigma {
        KernelSigma::Fixed(s) => s,
        KernelSigma::Auto => population_std(&finite_off),
    };
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Validation(format!(
            "kernel width must be positive and finite, got {sigma}"
        )));
    }
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distances.at(i, j);
            let k = (-(d * d) / (sigma * sigma)).exp();
            if k >= threshold {
                w[i * n + j] = k;
            }
        }
    }
    let adjacency = symmetrize_max(n, w);
    warn_isolated(&node_ids, &adjacency);
    SensorGraph::from_adjacency(node_ids, adjacency)
}

/// Graph from `|Pearson|` over jointly valid steps in `[0, train_end)`,
/// keeping each row's `top_k` strongest links before max-symmetrizing.
pub fn adjacency_from_correlation(panel: &SeriesPanel, train_end: usize, top_k: usize) -> Result<SensorGraph> {
    if train_end > panel.len() {
        return Err(Error::Validation(format!(
            "train_end {train_end} beyond panel length {}",
            panel.len()
        )));
    }
    let n = panel.n_sensors();
    let mut corr = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = abs_pearson(panel, i, j, train_end);
            corr[i * n + j] = c;
            corr[j * n + i] = c;
        }
    }
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i && corr[i * n + j] > 0.0).collect();
        // strongest first, lower index on ties
        order.sort_by(|&a, &b| corr[i * n + b].total_cmp(&corr[i * n + a]).then(a.cmp(&b)));
        for &j in order.iter().take(top_k) {
            w[i * n + j] = corr[i * n + j];
        }
    }
    let adjacency = symmetrize_max(n, w);
    warn_isolated(panel.sensor_ids(), &adjacency);
    SensorGraph::from_adjacency(panel.sensor_ids().to_vec(), adjacency)
}

fn abs_pearson(panel: &SeriesPanel, i: usize, j: usize, end: usize) -> f64 {
    let pairs: Vec<(f64, f64)> = (0..end)
        .filter(|&t| panel.is_valid(i, t) && panel.is_valid(j, t))
        .map(|t| (panel.value(i, t), panel.value(j, t)))
        .collect();
    if pairs.len() < 2 {
        return 0.0;
    }
    let k = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / k;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).abs().min(1.0)
}

fn symmetrize_max(n: usize, mut w: Vec<f64>) -> Tensor {
    for i in 0..n {
        for j in (i + 1)..n {
            let m = w[i * n + j].max(w[j * n + i]);
            w[i * n + j] = m;
            w[j * n + i] = m;
        }
    }
    Tensor::new(vec![n, n], w).expect("square matrix")
}

fn warn_isolated(ids: &[String], a: &Tensor) {
    for (i, id) in ids.iter().enumerate() {
        if a.row(i).iter().all(|&v| v == 0.0) && ids.len() > 1 {
            log::warn!("sensor {id} has no edges after thresholding; it keeps only its self-loop");
        }
    }
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Loads a `from,to,meters` edge list into a dense distance matrix over
/// `node_ids`. Unlisted pairs are infinitely far; each listed pair is
/// applied in both directions.
pub fn load_distance_csv(path: &Path, node_ids: &[String]) -> Result<Tensor> {
    let index: HashMap<&str, usize> = node_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n = node_ids.len();
    let mut d = vec![f64::INFINITY; n * n];
    for i in 0..n {
        d[i * n + i] = 0.0;
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                line: 1,
                msg: format!("{other:?}"),
            },
        })?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["from", "to", "meters"] {
        return Err(Error::Parse {
            line: 1,
            msg: "distance header must be `from,to,meters`".into(),
        });
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Schema(format!("line {line}: unknown sensor {s:?} in distance file")))
        };
        let (i, j) = (lookup(&rec[0])?, lookup(&rec[1])?);
        let m: f64 = rec[2].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad distance {:?}", &rec[2]),
        })?;
        if m < 0.0 || !m.is_finite() {
            return Err(Error::Parse {
                line,
                msg: format!("distance must be finite and nonnegative, got {m}"),
            });
        }
        if i == j {
            if m != 0.0 {
                return Err(Error::Validation(format!("line {line}: nonzero self distance")));
            }
            continue;
        }
        // the same pair listed twice keeps the shorter road
        let v = d[i * n + j].min(m);
        d[i * n + j] = v;
        d[j * n + i] = v;
    }
    Tensor::new(vec![n, n], d)
}

pub fn store_distance_csv(path: &Path, node_ids: &[String], distances: &Tensor) -> Result<()> {
    let n = node_ids.len();
    let mut out = String::from("from,to,meters\n");
    for i in 0..n {
        for j in (i + 1)..n {
            let d = distances.at(i, j);
            if d.is_finite() {
                out.push_str(&format!("{},{},{}\n", node_ids[i], node_ids[j], d));
            }
        }
    }
    write_text(path, &out)
}

pub fn store_graph(graph: &SensorGraph, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(GRAPH_MAGIC);
    w.u32(GRAPH_VERSION);
    w.u32(graph.n_nodes() as u32);
    for id in &graph.node_ids {
        w.str(id);
    }
    for &v in graph.adjacency.data() {
        w.f64(v);
    }
    for &v in graph.normalized.data() {
        w.f64(v);
    }
    w.write_to(path)
}

/// Reads a graph file; the stored `Â` is checked against a recomputation
/// from the stored `A`.
pub fn load_graph(path: &Path) -> Result<SensorGraph> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, "graph");
    r.magic(GRAPH_MAGIC)?;
    let version = r.u32()?;
    if version != GRAPH_VERSION {
        return Err(Error::Incompatible(format!(
            "graph version {version}, this build reads {GRAPH_VERSION}"
        )));
    }
    let n = r.u32()? as usize;
    let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let cells = r.len(16, (n * n) as u64)?;
    let a = r.f64s(cells)?;
    let a_hat = r.f64s(cells)?;
    r.finish()?;
    let graph = SensorGraph::from_adjacency(ids, Tensor::new(vec![n, n], a)?)?;
    if graph.normalized.data() != a_hat.as_slice() {
        return Err(Error::Corrupt(
            "stored normalized adjacency disagrees with the stored adjacency".into(),
        ));
    }
    Ok(graph)
}
