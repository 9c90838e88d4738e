//! Exact CART regression trees on presorted feature columns.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marks a leaf in [`TreeNode::feature`].
pub const LEAF: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitChoice {
    pub feature: usize,
    /// Rows with `x ≤ threshold` go left.
    pub threshold: f64,
    pub gain: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub value: f64,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.feature == LEAF
    }

    fn leaf(value: f64) -> Self {
        Self {
            feature: LEAF,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
        }
    }
}

/// Nodes in preorder; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            let node = &self.nodes[i];
            if node.is_leaf() {
                return node.value;
            }
            i = if row[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            let n = &nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + walk(nodes, n.left as usize).max(walk(nodes, n.right as usize))
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// Structural checks used after deserializing.
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Corrupt("tree without nodes".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.is_leaf() {
                if !n.value.is_finite() {
                    return Err(Error::Corrupt(format!("leaf {i} has a non-finite value")));
                }
                continue;
            }
            let (l, r) = (n.left as usize, n.right as usize);
            if n.feature as usize >= n_features || !n.threshold.is_finite() || l <= i || r <= l || r >= self.nodes.len()
            {
                return Err(Error::Corrupt(format!("tree node {i} is malformed")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried at each node; all of them when `None`.
    pub features_per_node: Option<usize>,
}

fn two_pass_sse(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let (sum, n) = vals.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    vals.map(|v| (v - mean) * (v - mean)).sum()
}

/// Threshold between two consecutive distinct sorted values, kept strictly
/// below `hi` when the midpoint rounds onto it.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = 0.5 * (lo + hi);
    if m >= hi || m < lo {
        lo
    } else {
        m
    }
}

/// Row-major feature matrix with per-feature orderings of the sample
/// positions. Position `p` refers to row `samples[p]`; bootstrap samples may
/// repeat rows.
pub(crate) struct Builder<'a> {
    x: &'a [f64],
    nf: usize,
    y: &'a [f64],
    samples: Vec<u32>,
    /// `orders[f]` sorts positions by feature `f`; `orders[nf]` is plain
    /// position order, used wherever sums need a fixed order.
    orders: Vec<Vec<u32>>,
    scratch: Vec<u32>,
    goes_left: Vec<bool>,
    pub importance: Vec<f64>,
}

impl<'a> Builder<'a> {
    pub fn new(x: &'a [f64], nf: usize, y: &'a [f64], samples: Vec<u32>) -> Self {
        let n = samples.len();
        let mut orders = Vec::with_capacity(nf + 1);
        for f in 0..nf {
            let mut o: Vec<u32> = (0..n as u32).collect();
            o.sort_by(|&a, &b| {
                let va = x[samples[a as usize] as usize * nf + f];
                let vb = x[samples[b as usize] as usize * nf + f];
                va.total_cmp(&vb).then(a.cmp(&b))
            });
            orders.push(o);
        }
        orders.push((0..n as u32).collect());
        Self {
            x,
            nf,
            y,
            samples,
            orders,
            scratch: vec![0; n],
            goes_left: vec![false; n],
            importance: vec![0.0; nf],
        }
    }

    /// Reuses the presorted orders for another target vector.
    pub fn retarget(&self, y: &'a [f64]) -> Self {
        Self {
            x: self.x,
            nf: self.nf,
            y,
            samples: self.samples.clone(),
            orders: self.orders.clone(),
            scratch: self.scratch.clone(),
            goes_left: self.goes_left.clone(),
            importance: vec![0.0; self.nf],
        }
    }

    fn xv(&self, pos: u32, f: usize) -> f64 {
        self.x[self.samples[pos as usize] as usize * self.nf + f]
    }

    fn yv(&self, pos: u32) -> f64 {
        self.y[self.samples[pos as usize] as usize]
    }

    fn exact_gain(&self, lo: usize, hi: usize, f: usize, threshold: f64, parent: f64) -> f64 {
        let canon = &self.orders[self.nf][lo..hi];
        let left = two_pass_sse(
            canon
                .iter()
                .filter(|&&p| self.xv(p, f) <= threshold)
                .map(|&p| self.yv(p)),
        );
        let right = two_pass_sse(
            canon
                .iter()
                .filter(|&&p| self.xv(p, f) > threshold)
                .map(|&p| self.yv(p)),
        );
        parent - left - right
    }

    /// Best split of positions `[lo, hi)` over `features`.
    ///
    /// Candidates are ranked with running sums, then every candidate within
    /// rounding distance of the best is rescored exactly as
    /// `SSE(parent) − SSE(left) − SSE(right)` with two-pass sums in position
    /// order. Ties go to the lowest feature, then the lowest threshold.
    pub fn search(&self, lo: usize, hi: usize, features: &[usize], min_leaf: usize) -> Option<SplitChoice> {
        let n = hi - lo;
        let min_leaf = min_leaf.max(1);
        if n < 2 * min_leaf {
            return None;
        }
        let canon = &self.orders[self.nf][lo..hi];
        let first = self.yv(canon[0]);
        if canon.iter().all(|&p| self.yv(p).to_bits() == first.to_bits()) {
            return None;
        }
        let total: f64 = canon.iter().map(|&p| self.yv(p)).sum();
        let total_sq: f64 = canon.iter().map(|&p| self.yv(p) * self.yv(p)).sum();

        let mut best = f64::NEG_INFINITY;
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for &f in features {
            let order = &self.orders[f][lo..hi];
            let mut sl = 0.0;
            for i in 0..n - 1 {
                sl += self.yv(order[i]);
                let nl = i + 1;
                if nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let (a, b) = (self.xv(order[i], f), self.xv(order[i + 1], f));
                if a == b {
                    continue;
                }
                let sr = total - sl;
                let score = sl * sl / nl as f64 + sr * sr / (n - nl) as f64;
                if score >= best - 1e-9 * total_sq {
                    best = best.max(score);
                    cands.push((f, i, score));
                }
            }
        }
        if cands.is_empty() {
            return None;
        }
        let tol = 1e-9 * total_sq;
        let parent = two_pass_sse(canon.iter().map(|&p| self.yv(p)));
        let mut chosen: Option<SplitChoice> = None;
        // `cands` is already ordered by feature then threshold
        for &(f, i, score) in &cands {
            if score < best - tol {
                continue;
            }
            let order = &self.orders[f][lo..hi];
            let threshold = midpoint(self.xv(order[i], f), self.xv(order[i + 1], f));
            let gain = self.exact_gain(lo, hi, f, threshold, parent);
            if chosen.is_none_or(|c| gain > c.gain) {
                chosen = Some(SplitChoice {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
        chosen
    }

    fn leaf_value(&self, lo: usize, hi: usize) -> f64 {
        let canon = &self.orders[self.nf][lo..hi];
        canon.iter().map(|&p| self.yv(p)).sum::<f64>() / (hi - lo) as f64
    }

    fn partition(&mut self, lo: usize, hi: usize, split: &SplitChoice) -> usize {
        for i in lo..hi {
            let p = self.orders[self.nf][i];
            self.goes_left[p as usize] = self.xv(p, split.feature) <= split.threshold;
        }
        let mut mid = lo;
        for k in 0..=self.nf {
            let order = &mut self.orders[k];
            let (mut l, mut r) = (lo, 0);
            for i in lo..hi {
                let p = order[i];
                if self.goes_left[p as usize] {
                    order[l] = p;
                    l += 1;
                } else {
                    self.scratch[r] = p;
                    r += 1;
                }
            }
            order[l..hi].copy_from_slice(&self.scratch[..r]);
            mid = l;
        }
        mid
    }

    pub fn build<R: Rng>(&mut self, params: &TreeParams, rng: &mut R) -> Tree {
        let mut nodes = Vec::new();
        let n = self.samples.len();
        self.grow(&mut nodes, 0, n, 0, params, rng);
        Tree { nodes }
    }

    fn grow<R: Rng>(
        &mut self,
        nodes: &mut Vec<TreeNode>,
        lo: usize,
        hi: usize,
        depth: usize,
        params: &TreeParams,
        rng: &mut R,
    ) -> u32 {
        let idx = nodes.len();
        nodes.push(TreeNode::leaf(self.leaf_value(lo, hi)));
        if depth >= params.max_depth {
            return idx as u32;
        }
        let features: Vec<usize> = match params.features_per_node {
            Some(k) if k < self.nf => {
                let mut f = sample(rng, self.nf, k).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..self.nf).collect(),
        };
        let Some(split) = self.search(lo, hi, &features, params.min_leaf) else {
            return idx as u32;
        };
        if split.gain <= 0.0 {
            return idx as u32;
        }
        self.importance[split.feature] += split.gain;
        let mid = self.partition(lo, hi, &split);
        let left = self.grow(nodes, lo, mid, depth + 1, params, rng);
        let right = self.grow(nodes, mid, hi, depth + 1, params, rng);
        nodes[idx] = TreeNode {
            feature: split.feature as u32,
            threshold: split.threshold,
            left,
            right,
            value: nodes[idx].value,
        };
        idx as u32
    }
}

/// Variance-reduction split of row-major `x` (`n_features` columns) over
/// the midpoints of consecutive distinct values of each candidate feature.
///
/// Returns `None` when no split separates anything: every candidate feature
/// is constant or every target is equal.
pub fn best_split(x: &[f64], n_features: usize, y: &[f64], candidates: &[usize]) -> Result<Option<SplitChoice>> {
    check_matrix(x, n_features, y)?;
    if y.len() < 2 {
        return Err(Error::Validation(format!(
            "best_split needs at least 2 rows, got {}",
            y.len()
        )));
    }
    if let Some(&f) = candidates.iter().find(|&&f| f >= n_features) {
        return Err(Error::Validation(format!("candidate feature {f} out of {n_features}")));
    }
    let mut feats = candidates.to_vec();
    feats.sort_unstable();
    feats.dedup();
    let b = Builder::new(x, n_features, y, (0..y.len() as u32).collect());
    Ok(b.search(0, y.len(), &feats, 1))
}

pub(crate) fn check_matrix(x: &[f64], n_features: usize, y: &[f64]) -> Result<()> {
    if n_features == 0 || x.len() != y.len() * n_features {
        return Err(Error::Dimension(format!(
            "{} feature cells for {} rows × {n_features} features",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("tree inputs must be finite".into()));
    }
    Ok(())
}
