use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::RoadId;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: RoadId,
    pub to: RoadId,
    pub weight: f64,
}

#[derive(Deserialize)]
struct RawNetwork {
    roads: Vec<RoadId>,
    edges: Vec<Edge>,
    #[serde(default)]
    coords: BTreeMap<RoadId, (f64, f64)>,
}

/// Directed, weighted road graph with optional map coordinates.
///
/// Self-loops are accepted in the input but never used as spatial neighbours:
/// a road's access to its own features goes through the sentinel key.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork")]
pub struct RoadNetwork {
    roads: Vec<RoadId>,
    edges: Vec<Edge>,
    coords: BTreeMap<RoadId, (f64, f64)>,
    #[serde(skip)]
    index: HashMap<RoadId, usize>,
    #[serde(skip)]
    in_adj: Vec<Vec<usize>>,
}

impl TryFrom<RawNetwork> for RoadNetwork {
    type Error = Error;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        RoadNetwork::new(raw.roads, raw.edges)?.with_coords(raw.coords)
    }
}

impl PartialEq for RoadNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.roads == other.roads && self.edges == other.edges && self.coords == other.coords
    }
}

impl RoadNetwork {
    pub fn new(roads: Vec<RoadId>, edges: Vec<Edge>) -> Result<Self> {
        let mut index = HashMap::with_capacity(roads.len());
        for (i, r) in roads.iter().enumerate() {
            if index.insert(r.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate road id {r}")));
            }
        }
        let mut seen = HashSet::new();
        let mut in_adj = vec![Vec::new(); roads.len()];
        for e in &edges {
            let from = *index
                .get(&e.from)
                .ok_or_else(|| Error::UnknownRoad(e.from.to_string()))?;
            let to = *index
                .get(&e.to)
                .ok_or_else(|| Error::UnknownRoad(e.to.to_string()))?;
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::invalid(format!(
                    "edge {}->{} has invalid weight {}",
                    e.from, e.to, e.weight
                )));
            }
            if !seen.insert((from, to)) {
                return Err(Error::invalid(format!("duplicate edge {}->{}", e.from, e.to)));
            }
            if from != to {
                in_adj[to].push(from);
            }
        }
        for adj in &mut in_adj {
            adj.sort_unstable();
        }
        Ok(RoadNetwork {
            roads,
            edges,
            coords: BTreeMap::new(),
            index,
            in_adj,
        })
    }

    pub fn with_coords(mut self, coords: BTreeMap<RoadId, (f64, f64)>) -> Result<Self> {
        for road in coords.keys() {
            if !self.index.contains_key(road) {
                return Err(Error::UnknownRoad(road.to_string()));
            }
        }
        self.coords = coords;
        Ok(self)
    }

    pub fn roads(&self) -> &[RoadId] {
        &self.roads
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.roads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roads.is_empty()
    }

    pub fn index_of(&self, road: &RoadId) -> Option<usize> {
        self.index.get(road).copied()
    }

    pub fn coords(&self, road: &RoadId) -> Option<(f64, f64)> {
        self.coords.get(road).copied()
    }

    pub fn all_coords(&self) -> &BTreeMap<RoadId, (f64, f64)> {
        &self.coords
    }

    /// Upstream neighbours of road `i` (sources of edges into `i`), ascending, self excluded.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_adj[i]
    }

    /// Stable content hash over roads and edges.
    pub fn content_hash(&self) -> String {
        crate::util::json_hash(&(&self.roads, &self.edges))
    }

    /// The same graph with roads listed in `order` (a permutation of indices).
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.roads.len() {
            return Err(Error::invalid("permutation length differs from road count"));
        }
        let roads = order.iter().map(|&i| self.roads[i].clone()).collect();
        RoadNetwork::new(roads, self.edges.clone())?.with_coords(self.coords.clone())
    }
}
