//! Attention bundles, spatio-temporal (ST) matrices and attention overrides.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::net::{Forward, ModelState};
use crate::data::{RoadId, SpeedPanel, WINDOW};
use crate::{Error, Result};

/// Forecast horizon in minutes: a positive multiple of 5 up to 60.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Horizon(u32);

/// The horizons reported throughout the views.
pub const HORIZONS: [Horizon; 4] = [Horizon(15), Horizon(30), Horizon(45), Horizon(60)];

impl Horizon {
    pub fn new(minutes: u32) -> Result<Self> {
        if minutes == 0 || minutes > 60 || minutes % 5 != 0 {
            return Err(Error::invalid(format!(
                "horizon must be a multiple of 5 minutes in 5..=60, got {minutes}"
            )));
        }
        Ok(Horizon(minutes))
    }

    pub fn minutes(self) -> u32 {
        self.0
    }

    /// Index of the output step this horizon reads (15 min -> 2).
    pub fn step_index(self) -> usize {
        (self.0 / 5) as usize - 1
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon(15)
    }
}

impl TryFrom<u32> for Horizon {
    type Error = Error;

    fn try_from(m: u32) -> Result<Self> {
        Horizon::new(m)
    }
}

impl From<Horizon> for u32 {
    fn from(h: Horizon) -> u32 {
        h.0
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}min", self.0)
    }
}

/// Which temporal attention the ST product uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StSource {
    /// Decoder cross-attention at the horizon's output step. This is the
    /// product the prediction is literally computed from.
    #[default]
    Decoder,
    /// Encoder temporal self-attention from the most recent input step.
    Encoder,
}

/// All attention weights of one forward pass over one window.
///
/// Spatial rows list weights over `neighbors[road]` followed by the sentinel.
/// Temporal tables are `[head][road][query][key]` with 12 keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBundle {
    pub window_start: DateTime<Utc>,
    pub heads: usize,
    pub roads: Vec<RoadId>,
    pub neighbors: Vec<Vec<usize>>,
    /// Last encoder layer: `[head][step][road][key]`.
    pub sa: Vec<Vec<Vec<Vec<f64>>>>,
    /// Last decoder layer cross-attention: query = output step, key = input step.
    pub ta: Vec<Vec<Vec<Vec<f64>>>>,
    /// Last encoder layer temporal self-attention.
    pub ta_encoder: Vec<Vec<Vec<Vec<f64>>>>,
    /// Last decoder layer causal self-attention (zero above the diagonal).
    pub ta_decoder: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionBundle {
    pub(crate) fn from_forward(fwd: &Forward, model: &ModelState, window: usize, start: DateTime<Utc>) -> Self {
        let heads = model.heads();
        let n = fwd.roads;
        let tape = &fwd.tape;
        let row = |r: usize, t: usize| (window * n + r) * WINDOW + t;

        let sw = tape.attention_weights(*fwd.enc_spatial.last().expect("encoder layer"));
        let sa = (0..heads)
            .map(|h| {
                (0..WINDOW)
                    .map(|t| {
                        (0..n)
                            .map(|r| {
                                let i = row(r, t);
                                (fwd.spatial_plan.offsets[i]..fwd.spatial_plan.offsets[i + 1])
                                    .map(|e| sw[[e, h]])
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let full = |w: &ndarray::Array2<f64>| -> Vec<Vec<Vec<Vec<f64>>>> {
            (0..heads)
                .map(|h| {
                    (0..n)
                        .map(|r| {
                            (0..WINDOW)
                                .map(|q| {
                                    let base = row(r, q) * WINDOW;
                                    (0..WINDOW).map(|k| w[[base + k, h]]).collect()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let ta = full(tape.attention_weights(*fwd.cross.last().expect("decoder layer")));
        let ta_encoder = full(tape.attention_weights(*fwd.enc_temporal.last().expect("encoder layer")));

        let cw = tape.attention_weights(*fwd.dec_causal.last().expect("decoder layer"));
        let ta_decoder = (0..heads)
            .map(|h| {
                (0..n)
                    .map(|r| {
                        (0..WINDOW)
                            .map(|q| {
                                let off = fwd.causal_plan.offsets[row(r, q)];
                                (0..WINDOW)
                                    .map(|k| if k <= q { cw[[off + k, h]] } else { 0.0 })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        AttentionBundle {
            window_start: start,
            heads,
            roads: model.network().roads().to_vec(),
            neighbors: (0..n).map(|r| model.network().in_neighbors(r).to_vec()).collect(),
            sa,
            ta,
            ta_encoder,
            ta_decoder,
        }
    }

    pub fn road_index(&self, road: &RoadId) -> Option<usize> {
        self.roads.iter().position(|r| r == road)
    }

    /// Spatial weight road `target` puts on its own sentinel at `step`.
    pub fn sentinel(&self, head: usize, step: usize, target: usize) -> f64 {
        *self.sa[head][step][target].last().expect("sentinel entry")
    }

    /// Temporal row feeding the ST product for `target`.
    pub fn temporal_row(&self, source: StSource, head: usize, target: usize, horizon: Horizon) -> &[f64] {
        match source {
            StSource::Decoder => &self.ta[head][target][horizon.step_index()],
            StSource::Encoder => &self.ta_encoder[head][target][WINDOW - 1],
        }
    }

    /// Natural decoder ST rows of `target` for every head and output step,
    /// expressed as override entries.
    pub fn st_rows(&self, target: usize) -> StRows {
        let rows = (0..self.heads)
            .map(|h| {
                (0..WINDOW)
                    .map(|q| {
                        let ta = &self.ta[h][target][q];
                        let mut entries = Vec::new();
                        for (tau, &tw) in ta.iter().enumerate() {
                            let sa = &self.sa[h][tau][target];
                            for (j, &r) in self.neighbors[target].iter().enumerate() {
                                entries.push(StEntry {
                                    road: r,
                                    step: tau,
                                    weight: tw * sa[j],
                                });
                            }
                            entries.push(StEntry {
                                road: target,
                                step: tau,
                                weight: tw * sa[sa.len() - 1],
                            });
                        }
                        entries
                    })
                    .collect()
            })
            .collect();
        StRows { rows }
    }
}

/// Spatio-temporal attention of one target road: `cell(r, τ) = TA(τ) × SA_τ(target → r)`.
///
/// `references` lists the target's upstream neighbours followed by the target
/// itself; the target's own cells carry the sentinel mass. Steps run from the
/// oldest input (60 minutes before the window end) to the most recent (5).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StMatrix {
    pub target: RoadId,
    pub horizon: Horizon,
    pub source: StSource,
    pub window_start: DateTime<Utc>,
    pub references: Vec<RoadId>,
    /// `[head][reference][step]`.
    pub per_head: Vec<Vec<Vec<f64>>>,
    /// Head mean, `[reference][step]`.
    pub mean: Vec<Vec<f64>>,
    pub self_reference: f64,
    pub head_self_reference: Vec<f64>,
}

impl StMatrix {
    pub fn from_bundle(
        bundle: &AttentionBundle,
        target: &RoadId,
        horizon: Horizon,
        source: StSource,
    ) -> Result<Self> {
        let ti = bundle
            .road_index(target)
            .ok_or_else(|| Error::UnknownRoad(target.to_string()))?;
        let nbrs = &bundle.neighbors[ti];
        let mut references: Vec<RoadId> = nbrs.iter().map(|&r| bundle.roads[r].clone()).collect();
        references.push(target.clone());
        let per_head: Vec<Vec<Vec<f64>>> = (0..bundle.heads)
            .map(|h| {
                let ta = bundle.temporal_row(source, h, ti, horizon);
                (0..references.len())
                    .map(|j| (0..WINDOW).map(|tau| ta[tau] * bundle.sa[h][tau][ti][j]).collect())
                    .collect()
            })
            .collect();
        let heads = bundle.heads as f64;
        let mean = (0..references.len())
            .map(|j| {
                (0..WINDOW)
                    .map(|tau| per_head.iter().map(|m| m[j][tau]).sum::<f64>() / heads)
                    .collect()
            })
            .collect();
        let self_idx = references.len() - 1;
        let head_self_reference: Vec<f64> =
            per_head.iter().map(|m| m[self_idx].iter().sum()).collect();
        let self_reference = head_self_reference.iter().sum::<f64>() / heads;
        Ok(StMatrix {
            target: target.clone(),
            horizon,
            source,
            window_start: bundle.window_start,
            references,
            per_head,
            mean,
            self_reference,
            head_self_reference,
        })
    }

    /// Cells of one head, or the head mean when `head` is `None`.
    pub fn cells(&self, head: Option<usize>) -> &[Vec<f64>] {
        match head {
            Some(h) => &self.per_head[h],
            None => &self.mean,
        }
    }

    pub fn total_mass(&self, head: Option<usize>) -> f64 {
        self.cells(head).iter().flatten().sum()
    }
}

/// One entry of an ST row: weight on `road`'s value at input `step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StEntry {
    pub road: usize,
    pub step: usize,
    pub weight: f64,
}

/// ST rows of one road for every head and output step: `rows[head][query]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StRows {
    pub rows: Vec<Vec<Vec<StEntry>>>,
}

impl StRows {
    pub fn row_sum(&self, head: usize, query: usize) -> f64 {
        self.rows[head][query].iter().map(|e| e.weight).sum()
    }

    pub fn self_mass(&self, head: usize, query: usize, road: usize) -> f64 {
        self.rows[head][query]
            .iter()
            .filter(|e| e.road == road)
            .map(|e| e.weight)
            .sum()
    }
}

/// Replacement ST rows keyed by (window position in batch, model road index).
/// An overridden road's decoder readout becomes `Σ weight · V(road, step)`
/// in every decoder layer; all other roads are untouched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionOverrides {
    map: BTreeMap<(usize, usize), StRows>,
}

impl AttentionOverrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, window: usize, road: usize, rows: StRows) {
        self.map.insert((window, road), rows);
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &StRows)> {
        self.map.iter()
    }

    pub(crate) fn validate(&self, windows: usize, roads: usize, heads: usize) -> Result<()> {
        for (&(w, r), st) in &self.map {
            if w >= windows || r >= roads {
                return Err(Error::invalid(format!("override for window {w}, road {r} is out of range")));
            }
            if st.rows.len() != heads || st.rows.iter().any(|h| h.len() != WINDOW) {
                return Err(Error::invalid(format!(
                    "override shape mismatch: expected {heads} heads x {WINDOW} output steps"
                )));
            }
            if st
                .rows
                .iter()
                .flatten()
                .flatten()
                .any(|e| e.road >= roads || e.step >= WINDOW || !e.weight.is_finite())
            {
                return Err(Error::invalid("override entry out of range"));
            }
        }
        Ok(())
    }
}

/// ST matrix of `target` for the window starting at panel step `start`.
pub fn extract_st_attention(
    model: &ModelState,
    panel: &SpeedPanel,
    start: usize,
    target: &RoadId,
    horizon: Horizon,
    source: StSource,
) -> Result<StMatrix> {
    if model.network().index_of(target).is_none() {
        return Err(Error::UnknownRoad(target.to_string()));
    }
    let bundle = model.attention(panel, start)?;
    StMatrix::from_bundle(&bundle, target, horizon, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_validation() {
        assert_eq!(Horizon::new(15).unwrap().step_index(), 2);
        assert_eq!(Horizon::new(60).unwrap().step_index(), 11);
        assert!(Horizon::new(0).is_err());
        assert!(Horizon::new(65).is_err());
        assert!(Horizon::new(17).is_err());
        let h: Horizon = serde_json::from_str("30").unwrap();
        assert_eq!(h.minutes(), 30);
        assert!(serde_json::from_str::<Horizon>("31").is_err());
    }

    fn one_hot_bundle() -> AttentionBundle {
        // Two roads, road 1 has road 0 upstream. Head 0 only.
        let mut sa = vec![vec![vec![vec![1.0], vec![0.0, 1.0]]; WINDOW]];
        sa[0][4][1] = vec![1.0, 0.0];
        let mut ta_row = vec![0.0; WINDOW];
        ta_row[4] = 1.0;
        let ta = vec![vec![vec![ta_row.clone(); WINDOW]; 2]];
        AttentionBundle {
            window_start: DateTime::from_timestamp(0, 0).unwrap(),
            heads: 1,
            roads: vec!["a".into(), "b".into()],
            neighbors: vec![vec![], vec![0]],
            sa,
            ta: ta.clone(),
            ta_encoder: ta.clone(),
            ta_decoder: ta,
        }
    }

    #[test]
    fn one_hot_attention_gives_single_cell() {
        let b = one_hot_bundle();
        let st = StMatrix::from_bundle(&b, &"b".into(), Horizon::default(), StSource::Decoder).unwrap();
        assert_eq!(st.references, vec![RoadId::from("a"), RoadId::from("b")]);
        for (j, row) in st.mean.iter().enumerate() {
            for (tau, &c) in row.iter().enumerate() {
                let expect = if j == 0 && tau == 4 { 1.0 } else { 0.0 };
                assert_eq!(c, expect);
            }
        }
        assert_eq!(st.self_reference, 0.0);
        let isolated = StMatrix::from_bundle(&b, &"a".into(), Horizon::default(), StSource::Decoder).unwrap();
        assert_eq!(isolated.self_reference, 1.0);
    }

    #[test]
    fn st_rows_match_matrix_cells() {
        let b = one_hot_bundle();
        let rows = b.st_rows(1);
        assert_eq!(rows.row_sum(0, 3), 1.0);
        assert_eq!(rows.self_mass(0, 3, 1), 0.0);
        let e = rows.rows[0][2].iter().find(|e| e.weight > 0.0).unwrap();
        assert_eq!((e.road, e.step), (0, 4));
    }
}
