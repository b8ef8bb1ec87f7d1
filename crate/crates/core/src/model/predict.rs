use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::attention::{AttentionBundle, AttentionOverrides, Horizon, StRows};
use super::net::{raw_predictions, ModelState};
use crate::data::{RoadId, SpeedPanel, WINDOW};
use crate::{Error, Result};

const INFERENCE_BATCH: usize = 32;

/// Forecasts for a set of windows over one panel, in the panel's speed unit.
///
/// Window `w` reads panel steps `window_starts[w]..+12` and forecasts steps
/// `window_starts[w] + 12 + q` for `q` in `0..12`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionPanel {
    pub roads: Vec<RoadId>,
    pub panel_start: DateTime<Utc>,
    pub window_starts: Vec<usize>,
    /// `[window][road][step]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl PredictionPanel {
    pub fn num_windows(&self) -> usize {
        self.window_starts.len()
    }

    pub fn road_index(&self, road: &RoadId) -> Option<usize> {
        self.roads.iter().position(|r| r == road)
    }

    /// Panel step forecast by window `w` at output step `q`.
    pub fn target_step(&self, w: usize, q: usize) -> usize {
        self.window_starts[w] + WINDOW + q
    }

    /// `(panel step, forecast)` pairs of one road at one horizon, in window order.
    pub fn horizon_series(&self, road: usize, horizon: Horizon) -> Vec<(usize, f64)> {
        let q = horizon.step_index();
        (0..self.num_windows())
            .map(|w| (self.target_step(w, q), self.values[w][road][q]))
            .collect()
    }
}

/// Every window start in a panel of `len` steps; with `with_targets` the 12
/// following steps must also lie inside the panel.
pub fn window_starts(len: usize, with_targets: bool) -> Vec<usize> {
    let need = if with_targets { 2 * WINDOW } else { WINDOW };
    if len < need {
        return Vec::new();
    }
    (0..=len - need).collect()
}

/// Override rows for some roads of one window, given that window's natural attention.
pub type PatchFn<'a> = dyn Fn(usize, &AttentionBundle) -> Result<Vec<(usize, StRows)>> + Sync + 'a;

impl ModelState {
    fn denormalized(&self, raw: Vec<Vec<Vec<f64>>>) -> Vec<Vec<Vec<f64>>> {
        raw.into_iter()
            .map(|w| {
                w.into_iter()
                    .enumerate()
                    .map(|(r, steps)| steps.into_iter().map(|z| self.norm.denormalize(r, z)).collect())
                    .collect()
            })
            .collect()
    }

    /// Forecast every window in `starts`.
    pub fn predict(&self, panel: &SpeedPanel, starts: &[usize]) -> Result<PredictionPanel> {
        self.predict_patched(panel, starts, None)
    }

    /// Forecast with optional attention patches.
    ///
    /// For each window the unpatched attention is computed first; `patch`
    /// maps it to replacement ST rows for selected roads and the window is
    /// re-run with those rows substituted. Parameters are never touched.
    pub fn predict_patched(
        &self,
        panel: &SpeedPanel,
        starts: &[usize],
        patch: Option<&PatchFn<'_>>,
    ) -> Result<PredictionPanel> {
        let map = self.check_panel_roads(panel)?;
        let mut values = Vec::with_capacity(starts.len());
        for (chunk_idx, chunk) in starts.chunks(INFERENCE_BATCH).enumerate() {
            let batch = self.build_batch(panel, &map, chunk)?;
            let fwd = self.forward(&batch, None);
            let fwd = match patch {
                None => fwd,
                Some(patch) => {
                    let mut overrides = AttentionOverrides::new();
                    for (b, &s) in chunk.iter().enumerate() {
                        let bundle = AttentionBundle::from_forward(&fwd, self, b, panel.timestamp(s));
                        for (road, rows) in patch(chunk_idx * INFERENCE_BATCH + b, &bundle)? {
                            overrides.insert(b, road, rows);
                        }
                    }
                    if overrides.is_empty() {
                        fwd
                    } else {
                        overrides.validate(chunk.len(), self.num_roads(), self.heads())?;
                        self.forward(&batch, Some(&overrides))
                    }
                }
            };
            values.extend(self.denormalized(raw_predictions(&fwd)));
        }
        Ok(PredictionPanel {
            roads: self.network.roads().to_vec(),
            panel_start: panel.start(),
            window_starts: starts.to_vec(),
            values,
        })
    }

    /// Forecast one window with explicit overrides (window index 0).
    pub fn predict_with_overrides(
        &self,
        panel: &SpeedPanel,
        start: usize,
        overrides: &AttentionOverrides,
    ) -> Result<Vec<Vec<f64>>> {
        let map = self.check_panel_roads(panel)?;
        overrides.validate(1, self.num_roads(), self.heads())?;
        let batch = self.build_batch(panel, &map, &[start])?;
        let fwd = self.forward(&batch, Some(overrides));
        Ok(self.denormalized(raw_predictions(&fwd)).remove(0))
    }

    /// All attention weights for the window starting at `start`.
    pub fn attention(&self, panel: &SpeedPanel, start: usize) -> Result<AttentionBundle> {
        Ok(self.attention_many(panel, &[start])?.remove(0))
    }

    pub fn attention_many(&self, panel: &SpeedPanel, starts: &[usize]) -> Result<Vec<AttentionBundle>> {
        let map = self.check_panel_roads(panel)?;
        if starts.iter().any(|&s| s + WINDOW > panel.len()) {
            return Err(Error::invalid("window needs 12 steps of history inside the panel"));
        }
        let mut out = Vec::with_capacity(starts.len());
        for chunk in starts.chunks(INFERENCE_BATCH) {
            let batch = self.build_batch(panel, &map, chunk)?;
            let fwd = self.forward(&batch, None);
            for (b, &s) in chunk.iter().enumerate() {
                out.push(AttentionBundle::from_forward(&fwd, self, b, panel.timestamp(s)));
            }
        }
        Ok(out)
    }
}
