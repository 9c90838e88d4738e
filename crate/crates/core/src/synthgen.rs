//! Seeded synthetic speed corpus with known structure.
//!
//! Clean speed of node `i` at step `t` is
//! `diurnal_i(t) + congestion_i(t) + rain(t)·rain_effect`. Congestion events
//! decay exponentially at their node and reach each direct neighbor one step
//! later at `propagation` strength. Rain is city-wide and recorded in the
//! exogenous table; nothing about it enters the deep model's inputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::graph::{adjacency_from_distance, store_distance_csv, store_graph, KernelSigma, SensorGraph};
use crate::panel::{store_exog_csv, store_panel, write_text, ExogTable, PanelFormat, SeriesPanel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub nodes: usize,
    /// Clusters arranged in a ring; nodes inside a cluster form a chain.
    pub clusters: usize,
    pub days: usize,
    pub step_secs: i64,
    pub t0: i64,
    pub base_speed: f64,
    pub diurnal_amplitude: f64,
    /// Per-node phase offsets are drawn from `±phase_jitter_hours`.
    pub phase_jitter_hours: f64,
    /// Expected events per node and day.
    pub congestion_rate: f64,
    pub congestion_magnitude: f64,
    /// e-folding time of an event, in steps.
    pub congestion_decay_steps: f64,
    pub propagation: f64,
    pub rain_mean_dry_steps: f64,
    pub rain_mean_wet_steps: f64,
    pub rain_effect: f64,
    pub noise_std: f64,
    pub missing_rate: f64,
    pub outage_hours: f64,
    pub intra_link_m: (f64, f64),
    pub inter_link_m: (f64, f64),
    pub kernel_sigma_m: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 40,
            clusters: 8,
            days: 30,
            step_secs: 300,
            t0: 1_704_067_200,
            base_speed: 60.0,
            diurnal_amplitude: 15.0,
            phase_jitter_hours: 1.0,
            congestion_rate: 3.0,
            congestion_magnitude: -25.0,
            congestion_decay_steps: 6.0,
            propagation: 0.5,
            rain_mean_dry_steps: 96.0,
            rain_mean_wet_steps: 18.0,
            rain_effect: -15.0,
            noise_std: 2.0,
            missing_rate: 0.02,
            outage_hours: 12.0,
            intra_link_m: (400.0, 800.0),
            inter_link_m: (1000.0, 1500.0),
            kernel_sigma_m: 1000.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.base_speed,
            self.diurnal_amplitude,
            self.phase_jitter_hours,
            self.congestion_rate,
            self.congestion_magnitude,
            self.congestion_decay_steps,
            self.propagation,
            self.rain_mean_dry_steps,
            self.rain_mean_wet_steps,
            self.rain_effect,
            self.noise_std,
            self.missing_rate,
            self.outage_hours,
            self.kernel_sigma_m,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "synthetic rates and magnitudes must be finite".into(),
            ));
        }
        if self.nodes < 2 || self.days == 0 || self.clusters == 0 || self.clusters > self.nodes {
            return Err(Error::Validation(format!(
                "need nodes ≥ 2, days ≥ 1 and 1 ≤ clusters ≤ nodes (got {}, {}, {})",
                self.nodes, self.days, self.clusters
            )));
        }
        if self.step_secs <= 0 || 86_400 % self.step_secs != 0 {
            return Err(Error::Validation(format!("step {}s must divide a day", self.step_secs)));
        }
        if self.congestion_rate < 0.0
            || self.congestion_decay_steps <= 0.0
            || self.rain_mean_dry_steps < 1.0
            || self.rain_mean_wet_steps < 1.0
            || self.noise_std < 0.0
            || !(0.0..1.0).contains(&self.missing_rate)
            || self.outage_hours < 0.0
            || self.kernel_sigma_m <= 0.0
        {
            return Err(Error::Validation("synthetic config has an out-of-range rate".into()));
        }
        for (lo, hi) in [self.intra_link_m, self.inter_link_m] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Validation(format!(
                    "link distance range ({lo}, {hi}) is invalid"
                )));
            }
        }
        Ok(())
    }

    pub fn steps_per_day(&self) -> usize {
        (86_400 / self.step_secs) as usize
    }

    pub fn len(&self) -> usize {
        self.days * self.steps_per_day()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CongestionEvent {
    pub node: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    /// Noisy readings with random gaps and one outage block.
    pub panel: SeriesPanel,
    /// Single column `rain` holding the true 0/1 indicator.
    pub exog: ExogTable,
    pub graph: SensorGraph,
    /// All-pairs shortest road distances in meters.
    pub distances: Tensor,
    /// Noise-free speeds, fully observed.
    pub truth: SeriesPanel,
    /// Clean speeds with the rain term left out, sensor-major.
    pub rain_free: Vec<f64>,
    pub rain: Vec<bool>,
    pub events: Vec<CongestionEvent>,
    /// Direct road links `(i, j)` with `i < j`; congestion spreads along these.
    pub links: Vec<(usize, usize)>,
    /// `(node, first step, length)` of the outage block.
    pub outage: (usize, usize, usize),
}

impl SynthCorpus {
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .links
            .iter()
            .filter_map(|&(a, b)| {
                if a == node {
                    Some(b)
                } else if b == node {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

// independent generator streams, so changing one component leaves the rest intact
const STREAM_TOPOLOGY: u64 = 1;
const STREAM_EVENTS: u64 = 2;
const STREAM_RAIN: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_MISSING: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn cluster_members(nodes: usize, clusters: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); clusters];
    for i in 0..nodes {
        out[i * clusters / nodes].push(i);
    }
    out
}

fn shortest_paths(n: usize, links: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; n * n];
    for i in 0..n {
        d[i * n + i] = 0.0;
    }
    for &(a, b, w) in links {
        d[a * n + b] = d[a * n + b].min(w);
        d[b * n + a] = d[b * n + a].min(w);
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[i * n + k];
            if !dik.is_finite() {
                continue;
            }
            for j in 0..n {
                let via = dik + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d
}

/// Builds the full corpus; identical configs give bit-identical output.
pub fn generate_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let n = config.nodes;
    let len = config.len();
    let per_day = config.steps_per_day();
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();

    let mut rng = stream(config.seed, STREAM_TOPOLOGY);
    let members = cluster_members(n, config.clusters);
    let mut weighted = Vec::new();
    for m in &members {
        for w in m.windows(2) {
            weighted.push((
                w[0],
                w[1],
                rng.random_range(config.intra_link_m.0..=config.intra_link_m.1),
            ));
        }
    }
    if config.clusters > 1 {
        for c in 0..config.clusters {
            let next = (c + 1) % config.clusters;
            if config.clusters == 2 && c == 1 {
                break;
            }
            let (a, b) = (*members[c].last().unwrap(), members[next][0]);
            weighted.push((
                a.min(b),
                a.max(b),
                rng.random_range(config.inter_link_m.0..=config.inter_link_m.1),
            ));
        }
    }
    let phases: Vec<f64> = (0..n)
        .map(|_| {
            if config.phase_jitter_hours > 0.0 {
                rng.random_range(-config.phase_jitter_hours..=config.phase_jitter_hours)
            } else {
                0.0
            }
        })
        .collect();
    let links: Vec<(usize, usize)> = weighted.iter().map(|&(a, b, _)| (a, b)).collect();
    let distances = Tensor::new(vec![n, n], shortest_paths(n, &weighted))?;
    let graph = adjacency_from_distance(
        ids.clone(),
        &distances,
        KernelSigma::Fixed(config.kernel_sigma_m),
        crate::graph::DEFAULT_DISTANCE_THRESHOLD,
    )?;

    let mut base = vec![0.0; n * len];
    for i in 0..n {
        for t in 0..len {
            let hours = (t % per_day) as f64 * config.step_secs as f64 / 3600.0;
            let angle = 2.0 * std::f64::consts::PI * (hours - 3.0 - phases[i]) / 24.0;
            base[i * len + t] = config.base_speed + config.diurnal_amplitude * angle.cos();
        }
    }

    let mut rng = stream(config.seed, STREAM_EVENTS);
    let p_event = config.congestion_rate / per_day as f64;
    let mut events = Vec::new();
    for i in 0..n {
        for t in 0..len {
            if rng.random_bool(p_event.min(1.0)) {
                events.push(CongestionEvent { node: i, step: t });
            }
        }
    }
    let tail = (8.0 * config.congestion_decay_steps).ceil() as usize;
    let profile: Vec<f64> = (0..=tail)
        .map(|k| config.congestion_magnitude * (-(k as f64) / config.congestion_decay_steps).exp())
        .collect();
    let neighbor_lists: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut v: Vec<usize> = links
                .iter()
                .filter_map(|&(a, b)| (a == i).then_some(b).or((b == i).then_some(a)))
                .collect();
            v.sort_unstable();
            v
        })
        .collect();
    let mut congestion = vec![0.0; n * len];
    for ev in &events {
        for (k, &p) in profile.iter().enumerate() {
            if ev.step + k < len {
                congestion[ev.node * len + ev.step + k] += p;
            }
            let lagged = ev.step + 1 + k;
            if lagged < len {
                for &j in &neighbor_lists[ev.node] {
                    congestion[j * len + lagged] += config.propagation * p;
                }
            }
        }
    }

    let mut rng = stream(config.seed, STREAM_RAIN);
    let (p_start, p_stop) = (1.0 / config.rain_mean_dry_steps, 1.0 / config.rain_mean_wet_steps);
    let mut rain = Vec::with_capacity(len);
    let mut wet = false;
    for _ in 0..len {
        wet = if wet {
            !rng.random_bool(p_stop)
        } else {
            rng.random_bool(p_start)
        };
        rain.push(wet);
    }

    let rain_free: Vec<f64> = base.iter().zip(&congestion).map(|(b, c)| b + c).collect();
    let clean: Vec<f64> = rain_free
        .iter()
        .enumerate()
        .map(|(k, &v)| if rain[k % len] { v + config.rain_effect } else { v })
        .collect();

    let mut rng = stream(config.seed, STREAM_NOISE);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Validation(format!("noise: {e}")))?;
    let observed: Vec<f64> = clean.iter().map(|&v| v + noise.sample(&mut rng)).collect();

    let mut rng = stream(config.seed, STREAM_MISSING);
    let mut mask: Vec<bool> = (0..n * len).map(|_| !rng.random_bool(config.missing_rate)).collect();
    let outage_len = ((config.outage_hours * 3600.0 / config.step_secs as f64).round() as usize).min(len);
    let outage_node = rng.random_range(0..n);
    let outage_start = if outage_len > 0 {
        rng.random_range(0..=len - outage_len)
    } else {
        0
    };
    for m in &mut mask[outage_node * len + outage_start..outage_node * len + outage_start + outage_len] {
        *m = false;
    }

    let panel = SeriesPanel::new(ids.clone(), config.t0, config.step_secs, len, observed, mask)?;
    let truth = SeriesPanel::from_dense(ids, config.t0, config.step_secs, len, clean)?;
    let exog = ExogTable::new(
        config.t0,
        config.step_secs,
        vec!["rain".into()],
        vec![rain.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect()],
    )?;
    Ok(SynthCorpus {
        config: config.clone(),
        panel,
        exog,
        graph,
        distances,
        truth,
        rain_free,
        rain,
        events,
        links,
        outage: (outage_node, outage_start, outage_len),
    })
}

/// File names written by [`write_corpus`].
pub const PANEL_FILE: &str = "panel.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const EXOG_FILE: &str = "exog.csv";
pub const DISTANCE_FILE: &str = "distances.csv";
pub const GRAPH_FILE: &str = "graph.bin";
pub const CONFIG_FILE: &str = "synth_config.json";

/// Writes panel, ground truth, exogenous table, distance list, graph and
/// the effective generator config into `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    store_panel(&corpus.panel, &dir.join(PANEL_FILE), PanelFormat::Csv)?;
    store_panel(&corpus.truth, &dir.join(TRUTH_FILE), PanelFormat::Csv)?;
    store_exog_csv(&corpus.exog, &dir.join(EXOG_FILE))?;
    store_distance_csv(&dir.join(DISTANCE_FILE), corpus.graph.node_ids(), &corpus.distances)?;
    store_graph(&corpus.graph, &dir.join(GRAPH_FILE))?;
    let mut json = serde_json::to_string_pretty(&corpus.config).expect("config serializes");
    json.push('\n');
    write_text(&dir.join(CONFIG_FILE), &json)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            nodes: 10,
            clusters: 2,
            days: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_length_is_8640_steps() {
        assert_eq!(SynthConfig::default().len(), 8640);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        // missing cells hold NaN, so compare bit patterns
        let bits = |c: &SynthCorpus| c.panel.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.panel.mask(), b.panel.mask());
        assert_eq!(
            (&a.truth, &a.exog, &a.graph, &a.rain_free),
            (&b.truth, &b.exog, &b.graph, &b.rain_free)
        );
        assert_eq!((&a.events, &a.links, a.outage), (&b.events, &b.links, b.outage));
        let c = generate_corpus(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn rain_is_additive() {
        let c = generate_corpus(&small()).unwrap();
        let len = c.truth.len();
        assert!(c.rain.iter().any(|&r| r) && c.rain.iter().any(|&r| !r));
        for i in 0..c.truth.n_sensors() {
            for t in 0..len {
                let d = c.truth.value(i, t) - c.rain_free[i * len + t];
                let expect = if c.rain[t] { -15.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn congestion_reaches_neighbors_one_step_later_at_half_strength() {
        let cfg = SynthConfig {
            congestion_rate: 0.0,
            ..small()
        };
        let quiet = generate_corpus(&cfg).unwrap();
        assert!(quiet.events.is_empty());
        // a single forced event through a rate that fires once in a while
        let busy = generate_corpus(&SynthConfig {
            congestion_rate: 0.5,
            ..small()
        })
        .unwrap();
        let ev = busy.events[0];
        let len = busy.truth.len();
        let others: Vec<_> = busy.events[1..].to_vec();
        for j in busy.neighbors(ev.node) {
            // cells touched only by this event: compare with the event-free corpus
            let touched = |t: usize| {
                others
                    .iter()
                    .any(|o| (o.node == j || busy.neighbors(o.node).contains(&j)) && o.step <= t && t <= o.step + 60)
            };
            let at = |t: usize| busy.rain_free[j * len + t] - quiet.rain_free[j * len + t];
            if ev.step + 2 < len && !touched(ev.step + 1) {
                assert_eq!(at(ev.step), 0.0, "neighbor moved before the lag");
                assert!((at(ev.step + 1) - 0.5 * -25.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn missing_rate_matches_config() {
        let c = generate_corpus(&SynthConfig::default()).unwrap();
        let (node, start, len) = c.outage;
        assert_eq!(len, 144);
        let l = c.panel.len();
        let mut missing = 0usize;
        let mut cells = 0usize;
        for i in 0..c.panel.n_sensors() {
            for t in 0..l {
                if i == node && (start..start + len).contains(&t) {
                    assert!(!c.panel.is_valid(i, t));
                    continue;
                }
                cells += 1;
                missing += usize::from(!c.panel.is_valid(i, t));
            }
        }
        let rate = missing as f64 / cells as f64;
        assert!((rate - 0.02).abs() <= 0.005, "missing rate {rate}");
    }

    #[test]
    fn graph_links_cover_direct_roads() {
        let c = generate_corpus(&SynthConfig::default()).unwrap();
        assert_eq!(c.links.len(), 40);
        for &(a, b) in &c.links {
            assert!(
                c.graph.adjacency().at(a, b) > 0.0,
                "link {a}-{b} missing from the graph"
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_corpus(&SynthConfig { nodes: 1, ..small() }).is_err());
        assert!(generate_corpus(&SynthConfig { days: 0, ..small() }).is_err());
        assert!(generate_corpus(&SynthConfig {
            noise_std: f64::NAN,
            ..small()
        })
        .is_err());
    }
}
