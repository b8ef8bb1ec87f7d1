//! Input encodings: z-normalised speed, time of day, day of week, position.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{SpeedPanel, SLOTS_PER_DAY, WINDOW};
use crate::{Error, Result};

/// Encoder features per (road, step): speed, sin/cos of slot, weekday one-hot.
pub const ENCODER_FEATURES: usize = 10;
/// Decoder features per (road, output step): sin/cos of slot, weekday one-hot.
pub const DECODER_FEATURES: usize = 9;

/// Per-road speed mean and standard deviation from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of each road over `panel`; roads with zero spread get std 1.
    pub fn fit(panel: &SpeedPanel) -> Self {
        let mut mean = Vec::with_capacity(panel.num_roads());
        let mut std = Vec::with_capacity(panel.num_roads());
        for i in 0..panel.num_roads() {
            let xs: Vec<f64> = panel.series(i).iter().copied().filter(|v| v.is_finite()).collect();
            let m = crate::util::mean(&xs);
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len().max(1) as f64;
            mean.push(m);
            std.push(if var > 1e-12 { var.sqrt() } else { 1.0 });
        }
        Normalization { mean, std }
    }

    pub fn normalize(&self, road: usize, v: f64) -> f64 {
        (v - self.mean[road]) / self.std[road]
    }

    pub fn denormalize(&self, road: usize, z: f64) -> f64 {
        z * self.std[road] + self.mean[road]
    }
}

pub(crate) fn time_features(slot: usize, weekday: usize, out: &mut [f64]) {
    let angle = 2.0 * PI * slot as f64 / SLOTS_PER_DAY as f64;
    out[0] = angle.sin();
    out[1] = angle.cos();
    for (d, o) in out[2..9].iter_mut().enumerate() {
        *o = if d == weekday { 1.0 } else { 0.0 };
    }
}

/// Fixed sinusoidal position code for step `pos` in a `width`-wide embedding.
pub fn position_encoding(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Encoder input rows for one window starting at `start`, road-major then
/// step (`road * 12 + step`). `roads` maps model road order to panel rows.
pub(crate) fn encoder_rows(
    panel: &SpeedPanel,
    norm: &Normalization,
    roads: &[usize],
    start: usize,
    out: &mut Vec<f64>,
) -> Result<()> {
    if start + WINDOW > panel.len() {
        return Err(Error::invalid(format!(
            "window at step {start} runs past the panel end ({})",
            panel.len()
        )));
    }
    let mut row = [0.0; ENCODER_FEATURES];
    for (m, &p) in roads.iter().enumerate() {
        for t in start..start + WINDOW {
            let v = panel.value(p, t);
            if !v.is_finite() {
                return Err(Error::MissingCell {
                    road: panel.roads()[p].to_string(),
                    step: t,
                });
            }
            row[0] = norm.normalize(m, v);
            time_features(panel.slot(t), panel.weekday(t), &mut row[1..]);
            out.extend_from_slice(&row);
        }
    }
    Ok(())
}

/// Decoder input rows: the time features of the 12 steps being forecast.
pub(crate) fn decoder_rows(panel_slot: impl Fn(usize) -> (usize, usize), roads: usize, start: usize, out: &mut Vec<f64>) {
    let mut row = [0.0; DECODER_FEATURES];
    for _ in 0..roads {
        for q in 0..WINDOW {
            let (slot, weekday) = panel_slot(start + WINDOW + q);
            time_features(slot, weekday, &mut row);
            out.extend_from_slice(&row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_are_distinct() {
        let codes: Vec<Vec<f64>> = (0..WINDOW).map(|p| position_encoding(p, 32)).collect();
        for a in 0..WINDOW {
            for b in a + 1..WINDOW {
                let diff: f64 = codes[a].iter().zip(&codes[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(diff > 1e-3, "positions {a} and {b} collide");
            }
        }
    }

    #[test]
    fn time_of_day_wraps() {
        let mut a = [0.0; 9];
        let mut b = [0.0; 9];
        time_features(0, 2, &mut a);
        time_features(SLOTS_PER_DAY, 2, &mut b);
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        assert_eq!(a[2..], b[2..]);
    }

    #[test]
    fn training_mean_maps_to_zero() {
        let n = Normalization {
            mean: vec![55.0],
            std: vec![4.0],
        };
        assert_eq!(n.normalize(0, 55.0), 0.0);
        assert_eq!(n.denormalize(0, n.normalize(0, 61.5)), 61.5);
        assert_eq!(n.denormalize(0, 0.0), 55.0);
    }
}
