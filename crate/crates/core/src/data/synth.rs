//! Deterministic synthetic road-speed generator with planted structure.
//!
//! Every road follows its cluster's daily profile (scaled and shifted per
//! road) plus a persistent congestion deviation and white measurement noise.
//! Within a cluster, roads form an upstream-to-downstream chain: each
//! downstream road replays its parent's deviation `lag` steps later, which
//! plants a lagged lead/lag (Granger) relationship. The ground truth records
//! both the planted clusters and the planted causal links.

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{Edge, RoadId, RoadNetwork, SpeedPanel, SpeedUnit, SLOTS_PER_DAY};
use crate::{Error, Result};

/// A Gaussian-shaped speed drop centred on a time of day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dip {
    pub center_hour: f64,
    pub width_hours: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub roads: usize,
    pub free_flow: f64,
    #[serde(default)]
    pub dips: Vec<Dip>,
    /// Chain roads of this cluster upstream-to-downstream with lagged replay.
    #[serde(default = "default_true")]
    pub chain: bool,
    /// Multiplier on this cluster's noise and deviation scale.
    #[serde(default = "default_one")]
    pub volatility: f64,
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

/// An explicit planted causal link between two roads (global road indices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedLink {
    pub from: usize,
    pub to: usize,
    pub lag: i64,
}

/// Generator settings; serialised as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub start: DateTime<Utc>,
    pub days: usize,
    pub unit: SpeedUnit,
    pub clusters: Vec<ClusterSpec>,
    /// Lag in 5-minute steps for within-cluster chain links.
    pub lag_steps: i64,
    /// Coefficient on the parent's lagged deviation.
    pub propagation: f64,
    /// AR(1) coefficient of each road's own deviation process.
    pub persistence: f64,
    /// Innovation standard deviation of the deviation process.
    pub incident_std: f64,
    /// White measurement noise standard deviation.
    pub noise_std: f64,
    /// Random cross-cluster graph edges (no planted causality).
    #[serde(default)]
    pub cross_edges: usize,
    /// Explicit links; each replaces any chain parent of its target.
    #[serde(default)]
    pub links: Vec<PlantedLink>,
    /// Prefix for generated road ids.
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_prefix() -> String {
    "r".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalLink {
    pub cause: RoadId,
    pub effect: RoadId,
    pub lag: i64,
}

/// What the generator planted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Planted cluster of each road, in panel road order.
    pub clusters: Vec<usize>,
    pub causal_links: Vec<CausalLink>,
}

fn profile(spec: &ClusterSpec, slot: usize) -> f64 {
    let hour = slot as f64 * 24.0 / SLOTS_PER_DAY as f64;
    let mut v = spec.free_flow;
    for dip in &spec.dips {
        // circular distance in hours
        let mut d = (hour - dip.center_hour).abs();
        d = d.min(24.0 - d);
        v -= dip.depth * (-0.5 * (d / dip.width_hours).powi(2)).exp();
    }
    v
}

fn dip(center_hour: f64, width_hours: f64, depth: f64) -> Dip {
    Dip {
        center_hour,
        width_hours,
        depth,
    }
}

fn cluster(roads: usize, free_flow: f64, dips: Vec<Dip>) -> ClusterSpec {
    ClusterSpec {
        roads,
        free_flow,
        dips,
        chain: true,
        volatility: 1.0,
    }
}

/// Distinct daily shapes used by the presets, cycled as needed.
fn preset_shapes() -> Vec<(f64, Vec<Dip>)> {
    vec![
        (65.0, vec![dip(8.0, 1.0, 30.0)]),
        (62.0, vec![dip(17.5, 1.3, 28.0)]),
        (60.0, vec![dip(7.5, 0.8, 18.0), dip(18.5, 0.8, 20.0)]),
        (55.0, vec![dip(13.0, 2.5, 18.0)]),
        (68.0, vec![dip(21.5, 0.9, 26.0), dip(3.0, 1.5, -6.0)]),
        (58.0, vec![dip(10.5, 0.7, 22.0), dip(15.0, 0.6, 12.0)]),
    ]
}

impl SynthConfig {
    fn preset(name: &str, cluster_sizes: &[usize], days: usize, noise: f64) -> Self {
        let shapes = preset_shapes();
        let clusters = cluster_sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let (ff, dips) = shapes[i % shapes.len()].clone();
                cluster(n, ff, dips)
            })
            .collect();
        SynthConfig {
            name: name.into(),
            start: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            days,
            unit: SpeedUnit::Mph,
            clusters,
            lag_steps: 2,
            propagation: 0.9,
            persistence: 0.95,
            incident_std: 1.5 * noise,
            noise_std: noise,
            cross_edges: cluster_sizes.len(),
            links: Vec::new(),
            id_prefix: "r".into(),
        }
    }

    /// Two clusters of five roads.
    pub fn two_cluster(noise: f64) -> Self {
        Self::preset("two-cluster", &[5, 5], 7, noise)
    }

    /// Five planted clusters, 20 roads.
    pub fn ulsan_style(noise: f64) -> Self {
        Self::preset("ulsan-style", &[4, 4, 4, 4, 4], 21, noise)
    }

    /// Six planted clusters, 24 roads.
    pub fn la_style(noise: f64) -> Self {
        Self::preset("la-style", &[4, 4, 4, 4, 4, 4], 21, noise)
    }

    pub fn num_roads(&self) -> usize {
        self.clusters.iter().map(|c| c.roads).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() || self.num_roads() == 0 {
            return Err(Error::invalid("generator needs at least one road"));
        }
        if self.clusters.iter().any(|c| c.roads == 0) {
            return Err(Error::invalid("every cluster needs at least one road"));
        }
        if self.days == 0 {
            return Err(Error::invalid("days must be positive"));
        }
        if self.lag_steps < 0 || self.links.iter().any(|l| l.lag < 0) {
            return Err(Error::invalid("propagation lags must be non-negative"));
        }
        if self.noise_std < 0.0 || self.incident_std < 0.0 {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.persistence.abs()) {
            return Err(Error::invalid("persistence must lie in (-1, 1)"));
        }
        let n = self.num_roads();
        if self.links.iter().any(|l| l.from >= n || l.to >= n || l.from == l.to) {
            return Err(Error::invalid("link references an unknown road or itself"));
        }
        if !super::panel::is_grid_aligned(&self.start) {
            return Err(Error::invalid("start must be on the 5-minute grid"));
        }
        Ok(())
    }
}

/// Parent of each road as `(parent, lag)`, and a parents-first order.
fn parents(config: &SynthConfig) -> Result<(Vec<Option<(usize, i64)>>, Vec<usize>)> {
    let n = config.num_roads();
    let mut parent = vec![None; n];
    let mut base = 0;
    for c in &config.clusters {
        if c.chain {
            for j in 1..c.roads {
                parent[base + j] = Some((base + j - 1, config.lag_steps));
            }
        }
        base += c.roads;
    }
    for l in &config.links {
        parent[l.to] = Some((l.from, l.lag));
    }
    // Topological order; a cycle shows up as a road that never resolves.
    let mut order = Vec::with_capacity(n);
    let mut done = vec![false; n];
    while order.len() < n {
        let before = order.len();
        for i in 0..n {
            if done[i] {
                continue;
            }
            if parent[i].is_none_or(|(p, _)| done[p]) {
                done[i] = true;
                order.push(i);
            }
        }
        if order.len() == before {
            return Err(Error::invalid("planted links form a cycle"));
        }
    }
    Ok((parent, order))
}

/// Generate a panel, its road network and the planted ground truth.
pub fn synth_generate(
    config: &SynthConfig,
    seed: u64,
) -> Result<(SpeedPanel, RoadNetwork, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.num_roads();
    let len = config.days * SLOTS_PER_DAY;
    let ids: Vec<RoadId> = (0..n)
        .map(|i| RoadId::new(format!("{}{:03}", config.id_prefix, i)))
        .collect();

    let mut road_cluster = Vec::with_capacity(n);
    for (c, spec) in config.clusters.iter().enumerate() {
        road_cluster.extend(std::iter::repeat_n(c, spec.roads));
    }
    let (parent, order) = parents(config)?;

    // Per-road affine variation of the shared cluster profile.
    let scale: Vec<f64> = (0..n).map(|_| rng.random_range(0.9..1.1)).collect();
    let shift: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();

    let first_slot = (config.start.timestamp().rem_euclid(86_400) / 300) as usize;
    let mut deviation = vec![vec![0.0; len]; n];
    let mut series = vec![vec![0.0; len]; n];
    for &i in &order {
        let spec = &config.clusters[road_cluster[i]];
        let vol = spec.volatility;
        let own_std = match parent[i] {
            Some(_) => config.incident_std * vol * (1.0 - config.propagation.powi(2)).max(0.0).sqrt(),
            None => config.incident_std * vol,
        };
        let mut own = 0.0;
        for t in 0..len {
            let eta: f64 = rng.sample(StandardNormal);
            own = config.persistence * own + own_std * eta;
            let inherited = match parent[i] {
                Some((p, lag)) if t as i64 >= lag => {
                    config.propagation * deviation[p][t - lag as usize]
                }
                _ => 0.0,
            };
            deviation[i][t] = own + inherited;
        }
        for t in 0..len {
            let eps: f64 = rng.sample(StandardNormal);
            let slot = (first_slot + t) % SLOTS_PER_DAY;
            let v = scale[i] * profile(spec, slot) + shift[i] + deviation[i][t]
                + config.noise_std * vol * eps;
            series[i][t] = v.max(1.0);
        }
    }

    let mut edges = Vec::new();
    let mut causal_links = Vec::new();
    for (i, p) in parent.iter().enumerate() {
        if let Some((p, lag)) = *p {
            edges.push(Edge {
                from: ids[p].clone(),
                to: ids[i].clone(),
                weight: 1.0,
            });
            causal_links.push(CausalLink {
                cause: ids[p].clone(),
                effect: ids[i].clone(),
                lag,
            });
        }
    }
    let mut existing: std::collections::HashSet<(usize, usize)> = parent
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|(p, _)| (p, i)))
        .collect();
    let mut added = 0;
    let mut attempts = 0;
    while added < config.cross_edges && attempts < 100 * (config.cross_edges + 1) && n > 1 {
        attempts += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b || road_cluster[a] == road_cluster[b] || !existing.insert((a, b)) {
            continue;
        }
        edges.push(Edge {
            from: ids[a].clone(),
            to: ids[b].clone(),
            weight: 0.5,
        });
        added += 1;
    }

    let k = config.clusters.len() as f64;
    let mut coords = BTreeMap::new();
    let mut idx = 0;
    for (c, spec) in config.clusters.iter().enumerate() {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / k;
        let (clat, clon) = (34.05 + 0.08 * angle.sin(), -118.25 + 0.1 * angle.cos());
        for j in 0..spec.roads {
            let step = j as f64 * 0.006;
            coords.insert(ids[idx].clone(), (clat + step * angle.cos(), clon - step * angle.sin()));
            idx += 1;
        }
    }

    let network = RoadNetwork::new(ids.clone(), edges)?.with_coords(coords)?;
    let panel = SpeedPanel::from_complete(config.start, config.unit, ids, series)?;
    Ok((
        panel,
        network,
        GroundTruth {
            clusters: road_cluster,
            causal_links,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig::two_cluster(1.0);
        let (a, ga, ta) = synth_generate(&cfg, 7).unwrap();
        let (b, gb, tb) = synth_generate(&cfg, 7).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(ga, gb);
        assert_eq!(ta, tb);
        let (c, _, _) = synth_generate(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::two_cluster(1.0);
        cfg.clusters.clear();
        assert!(synth_generate(&cfg, 0).is_err());
        let mut cfg = SynthConfig::two_cluster(1.0);
        cfg.lag_steps = -1;
        assert!(synth_generate(&cfg, 0).is_err());
        let mut cfg = SynthConfig::two_cluster(1.0);
        cfg.links = vec![
            PlantedLink { from: 0, to: 5, lag: 1 },
            PlantedLink { from: 5, to: 0, lag: 1 },
        ];
        assert!(synth_generate(&cfg, 0).is_err());
    }

    #[test]
    fn ground_truth_matches_chains() {
        let cfg = SynthConfig::two_cluster(1.0);
        let (panel, net, truth) = synth_generate(&cfg, 1).unwrap();
        assert_eq!(panel.num_roads(), 10);
        assert_eq!(panel.len(), 7 * 288);
        assert_eq!(truth.clusters, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(truth.causal_links.len(), 8);
        assert!(truth.causal_links.iter().all(|l| l.lag == 2));
        assert_eq!(net.all_coords().len(), 10);
        assert!(panel.is_complete());
    }

    #[test]
    fn rush_hour_profile_dips_at_configured_slot() {
        let spec = cluster(1, 65.0, vec![dip(8.0, 1.0, 30.0)]);
        let rush = profile(&spec, 8 * 12);
        assert!((rush - 35.0).abs() < 1e-9);
        assert!(profile(&spec, 0) > 64.9);
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = SynthConfig::la_style(1.0);
        let s = serde_json::to_string_pretty(&cfg).unwrap();
        let back: SynthConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.clusters.len(), 6);
        assert_eq!(SynthConfig::ulsan_style(1.0).clusters.len(), 5);
    }
}
