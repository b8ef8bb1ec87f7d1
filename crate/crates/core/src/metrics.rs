//! Per-road forecast errors, error cohorts and the small readouts shown next
//! to them (speed histograms, trailing-hour AE/STD, historical-average baseline).

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{RoadId, SpeedPanel, SLOTS_PER_DAY, WINDOW};
use crate::model::{Horizon, PredictionPanel, HORIZONS};
use crate::util::{percentile_type7, sample_std};
use crate::{Error, Result};

/// MAE, RMSE and MAPE over a set of (prediction, actual) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae: f64,
    pub rmse: f64,
    /// Percent, over nonzero actuals only; `None` when every actual is zero.
    pub mape: Option<f64>,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Option<Self> {
        let (mut abs, mut sq, mut pct, mut n, mut n_pct) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (p, a) in pairs {
            let e = p - a;
            abs += e.abs();
            sq += e * e;
            n += 1;
            if a != 0.0 {
                pct += (e / a).abs();
                n_pct += 1;
            }
        }
        if n == 0 {
            return None;
        }
        Some(ErrorStats {
            mae: abs / n as f64,
            rmse: (sq / n as f64).sqrt(),
            mape: (n_pct > 0).then(|| 100.0 * pct / n_pct as f64),
            count: n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonErrors {
    pub horizon: Horizon,
    pub stats: Option<ErrorStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadErrors {
    pub road: RoadId,
    pub horizons: Vec<HorizonErrors>,
    /// Mean of the per-horizon MAEs.
    pub average_mae: Option<f64>,
    /// No observed actual overlapped the forecasts; excluded from cohorts.
    pub flagged: bool,
}

/// Errors of every road at the reported horizons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub horizons: Vec<Horizon>,
    pub roads: Vec<RoadErrors>,
}

impl ErrorTable {
    pub fn road(&self, road: &RoadId) -> Option<&RoadErrors> {
        self.roads.iter().find(|r| &r.road == road)
    }

    pub fn stats(&self, road: &RoadId, horizon: Horizon) -> Option<&ErrorStats> {
        self.road(road)?
            .horizons
            .iter()
            .find(|h| h.horizon == horizon)?
            .stats
            .as_ref()
    }

    pub fn mae(&self, road: &RoadId, horizon: Horizon) -> Option<f64> {
        self.stats(road, horizon).map(|s| s.mae)
    }

    /// `(road, MAE)` for every road with a defined MAE at `horizon`.
    pub fn maes(&self, horizon: Horizon) -> Vec<(RoadId, f64)> {
        self.roads
            .iter()
            .filter(|r| !r.flagged)
            .filter_map(|r| Some((r.road.clone(), self.mae(&r.road, horizon)?)))
            .collect()
    }

    /// `road_id,horizon,mae,rmse,mape`; undefined values are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["road_id", "horizon", "mae", "rmse", "mape"])?;
        for r in &self.roads {
            for h in &r.horizons {
                let (mae, rmse, mape) = match &h.stats {
                    Some(s) => (
                        s.mae.to_string(),
                        s.rmse.to_string(),
                        s.mape.map(|m| m.to_string()).unwrap_or_default(),
                    ),
                    None => Default::default(),
                };
                w.write_record([r.road.as_str(), &h.horizon.minutes().to_string(), &mae, &rmse, &mape])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Pairs of one road at one horizon, skipping imputed or missing actuals.
fn horizon_pairs(pred: &PredictionPanel, actual: &SpeedPanel, road: usize, p: usize, horizon: Horizon) -> Vec<(f64, f64)> {
    pred.horizon_series(road, horizon)
        .into_iter()
        .filter(|&(t, _)| t < actual.len() && !actual.mask(p)[t] && actual.value(p, t).is_finite())
        .map(|(t, v)| (v, actual.value(p, t)))
        .collect()
}

/// Absolute errors of one road at one horizon, in window order.
pub fn absolute_errors(pred: &PredictionPanel, actual: &SpeedPanel, road: &RoadId, horizon: Horizon) -> Result<Vec<f64>> {
    let r = pred
        .road_index(road)
        .ok_or_else(|| Error::UnknownRoad(road.to_string()))?;
    let p = actual
        .road_index(road)
        .ok_or_else(|| Error::UnknownRoad(road.to_string()))?;
    Ok(horizon_pairs(pred, actual, r, p, horizon)
        .into_iter()
        .map(|(a, b)| (a - b).abs())
        .collect())
}

/// Errors at 15/30/45/60 minutes against `actual` (the panel the windows were
/// cut from). Imputed actuals are not scored.
pub fn compute_errors(pred: &PredictionPanel, actual: &SpeedPanel) -> Result<ErrorTable> {
    if pred.panel_start != actual.start() {
        return Err(Error::invalid("predictions were made on a different panel"));
    }
    let mut roads = Vec::with_capacity(pred.roads.len());
    for (r, id) in pred.roads.iter().enumerate() {
        let p = actual
            .road_index(id)
            .ok_or_else(|| Error::UnknownRoad(id.to_string()))?;
        let horizons: Vec<HorizonErrors> = HORIZONS
            .iter()
            .map(|&h| HorizonErrors {
                horizon: h,
                stats: ErrorStats::from_pairs(horizon_pairs(pred, actual, r, p, h)),
            })
            .collect();
        let maes: Vec<f64> = horizons.iter().filter_map(|h| h.stats.as_ref().map(|s| s.mae)).collect();
        let flagged = maes.is_empty();
        if flagged {
            tracing::warn!(road = %id, "no scored test overlap; road excluded from cohorts");
        }
        roads.push(RoadErrors {
            road: id.clone(),
            average_mae: (!flagged).then(|| maes.iter().sum::<f64>() / maes.len() as f64),
            horizons,
            flagged,
        });
    }
    Ok(ErrorTable {
        horizons: HORIZONS.to_vec(),
        roads,
    })
}

/// Low-error (MAE < Q1) and high-error (MAE > Q3) roads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCohorts {
    pub horizon: Horizon,
    pub q1: f64,
    pub q3: f64,
    pub low: Vec<RoadId>,
    pub high: Vec<RoadId>,
}

impl ErrorCohorts {
    pub fn is_high(&self, road: &RoadId) -> bool {
        self.high.contains(road)
    }

    pub fn is_low(&self, road: &RoadId) -> bool {
        self.low.contains(road)
    }
}

/// Cohorts from explicit `(road, MAE)` values; quartiles by linear interpolation.
pub fn cohorts_from_values(values: &[(RoadId, f64)], horizon: Horizon) -> Result<ErrorCohorts> {
    if values.len() < 4 {
        return Err(Error::invalid(format!(
            "quartile cohorts need at least 4 roads with a defined MAE, got {}",
            values.len()
        )));
    }
    let mut xs: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
    xs.sort_by(f64::total_cmp);
    let q1 = percentile_type7(&xs, 0.25);
    let q3 = percentile_type7(&xs, 0.75);
    let mut low: Vec<RoadId> = values.iter().filter(|(_, v)| *v < q1).map(|(r, _)| r.clone()).collect();
    let mut high: Vec<RoadId> = values.iter().filter(|(_, v)| *v > q3).map(|(r, _)| r.clone()).collect();
    low.sort();
    high.sort();
    Ok(ErrorCohorts {
        horizon,
        q1,
        q3,
        low,
        high,
    })
}

pub fn quartile_cohorts(table: &ErrorTable, horizon: Horizon) -> Result<ErrorCohorts> {
    cohorts_from_values(&table.maes(horizon), horizon)
}

/// Roads whose MAE exceeds `threshold` (drawn with a black centre on the map).
pub fn mae_filter(table: &ErrorTable, horizon: Horizon, threshold: f64) -> Vec<RoadId> {
    table
        .maes(horizon)
        .into_iter()
        .filter(|(_, m)| *m > threshold)
        .map(|(r, _)| r)
        .collect()
}

/// The `ceil(fraction × N)` roads with the highest MAE (ties by road id).
pub fn top_error_fraction(table: &ErrorTable, horizon: Horizon, fraction: f64) -> Vec<RoadId> {
    let mut maes = table.maes(horizon);
    maes.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let n = (fraction.clamp(0.0, 1.0) * maes.len() as f64).ceil() as usize;
    maes.into_iter().take(n).map(|(r, _)| r).collect()
}

/// Fixed-width speed histogram from 0, heights scaled by the largest count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedHistogram {
    pub bin_width: f64,
    /// Lower edge of each bin.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub heights: Vec<f64>,
    /// Sample standard deviation of the speeds.
    pub std: f64,
}

pub fn speed_histogram(panel: &SpeedPanel, road: &RoadId, bin_width: f64) -> Result<SpeedHistogram> {
    if !(bin_width > 0.0) {
        return Err(Error::invalid("bin width must be positive"));
    }
    let xs: Vec<f64> = panel
        .series_of(road)?
        .iter()
        .copied()
        .filter(|v| v.is_finite() && *v >= 0.0)
        .collect();
    let max = xs.iter().copied().fold(0.0, f64::max);
    let bins = (max / bin_width).floor() as usize + 1;
    let mut counts = vec![0usize; bins];
    for &x in &xs {
        counts[((x / bin_width).floor() as usize).min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    Ok(SpeedHistogram {
        bin_width,
        edges: (0..bins).map(|i| i as f64 * bin_width).collect(),
        heights: counts.iter().map(|&c| c as f64 / top).collect(),
        counts,
        std: sample_std(&xs),
    })
}

/// Trailing-hour readout at a cursor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedReadout {
    /// Mean absolute error over the 12 steps ending at the cursor.
    pub ae: f64,
    /// Sample standard deviation of actual speeds over the same steps.
    pub std: f64,
}

impl fmt::Display for WindowedReadout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AE: {:.2} STD:{:.2}", self.ae, self.std)
    }
}

/// AE and speed STD over steps `t-11..=t`. `predicted[i]` is the forecast for
/// step `i` (NaN where none exists); steps without a forecast are skipped.
pub fn windowed_ae(predicted: &[f64], actual: &[f64], t: usize) -> Result<WindowedReadout> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: actual.len(),
        });
    }
    if t >= actual.len() || t + 1 < WINDOW {
        return Err(Error::invalid(format!("cursor {t} does not have one hour of history")));
    }
    let range = t + 1 - WINDOW..=t;
    let errs: Vec<f64> = range
        .clone()
        .filter(|&i| predicted[i].is_finite() && actual[i].is_finite())
        .map(|i| (predicted[i] - actual[i]).abs())
        .collect();
    if errs.is_empty() {
        return Err(Error::invalid(format!("no forecasts in the hour before step {t}")));
    }
    let speeds: Vec<f64> = actual[range].iter().copied().filter(|v| v.is_finite()).collect();
    Ok(WindowedReadout {
        ae: errs.iter().sum::<f64>() / errs.len() as f64,
        std: sample_std(&speeds),
    })
}

/// Mean speed per (road, weekday, slot) from a training panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoricalAverage {
    pub roads: Vec<RoadId>,
    /// `[road][weekday * 288 + slot]`, NaN where never observed.
    table: Vec<Vec<f64>>,
    slot_mean: Vec<Vec<f64>>,
    road_mean: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(train: &SpeedPanel) -> Self {
        let n = train.num_roads();
        let mut table = vec![vec![(0.0, 0usize); 7 * SLOTS_PER_DAY]; n];
        let mut slots = vec![vec![(0.0, 0usize); SLOTS_PER_DAY]; n];
        let mut total = vec![(0.0, 0usize); n];
        for r in 0..n {
            for t in 0..train.len() {
                let v = train.value(r, t);
                if !v.is_finite() {
                    continue;
                }
                let (slot, day) = (train.slot(t), train.weekday(t));
                let cell = &mut table[r][day * SLOTS_PER_DAY + slot];
                cell.0 += v;
                cell.1 += 1;
                slots[r][slot].0 += v;
                slots[r][slot].1 += 1;
                total[r].0 += v;
                total[r].1 += 1;
            }
        }
        let avg = |(s, c): (f64, usize)| if c > 0 { s / c as f64 } else { f64::NAN };
        HistoricalAverage {
            roads: train.roads().to_vec(),
            table: table.into_iter().map(|r| r.into_iter().map(avg).collect()).collect(),
            slot_mean: slots.into_iter().map(|r| r.into_iter().map(avg).collect()).collect(),
            road_mean: total.into_iter().map(avg).collect(),
        }
    }

    /// Historical value for road index `r` at a weekday and slot, falling back
    /// to the slot mean over all weekdays, then the road mean.
    pub fn value(&self, r: usize, weekday: usize, slot: usize) -> f64 {
        let v = self.table[r][weekday * SLOTS_PER_DAY + slot];
        if v.is_finite() {
            return v;
        }
        let v = self.slot_mean[r][slot];
        if v.is_finite() {
            v
        } else {
            self.road_mean[r]
        }
    }

    /// Baseline forecasts shaped like model predictions.
    pub fn predict(&self, panel: &SpeedPanel, starts: &[usize]) -> Result<PredictionPanel> {
        if let Some(r) = self.roads.iter().find(|r| panel.road_index(r).is_none()) {
            return Err(Error::UnknownRoad(r.to_string()));
        }
        if starts.iter().any(|&s| s + 2 * WINDOW > panel.len()) {
            return Err(Error::invalid("forecast window runs past the end of the panel"));
        }
        let values = starts
            .iter()
            .map(|&s| {
                (0..self.roads.len())
                    .map(|r| {
                        (0..WINDOW)
                            .map(|q| {
                                let t = s + WINDOW + q;
                                self.value(r, panel.weekday(t), panel.slot(t))
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(PredictionPanel {
            roads: self.roads.clone(),
            panel_start: panel.start(),
            window_starts: starts.to_vec(),
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_by_hand() {
        let s = ErrorStats::from_pairs([(1.0, 0.0), (3.0, 0.0)]).unwrap();
        assert_eq!(s.mae, 2.0);
        assert_eq!(s.rmse, 5f64.sqrt());
        assert_eq!(s.mape, None);
        let s = ErrorStats::from_pairs([(12.0, 10.0), (8.0, 10.0)]).unwrap();
        assert_eq!((s.mae, s.rmse), (2.0, 2.0));
        assert!((s.mape.unwrap() - 20.0).abs() < 1e-12);
        assert!(ErrorStats::from_pairs([]).is_none());
    }

    #[test]
    fn quartile_fixture() {
        let vals: Vec<(RoadId, f64)> = (1..=8).map(|i| (RoadId::new(format!("r{i}")), i as f64)).collect();
        let c = cohorts_from_values(&vals, Horizon::default()).unwrap();
        assert_eq!((c.q1, c.q3), (2.75, 6.25));
        assert_eq!(c.low, vec![RoadId::from("r1"), RoadId::from("r2")]);
        assert_eq!(c.high, vec![RoadId::from("r7"), RoadId::from("r8")]);
        let same: Vec<(RoadId, f64)> = (1..=5).map(|i| (RoadId::new(format!("r{i}")), 3.0)).collect();
        let c = cohorts_from_values(&same, Horizon::default()).unwrap();
        assert!(c.low.is_empty() && c.high.is_empty());
        assert!(cohorts_from_values(&vals[..3], Horizon::default()).is_err());
    }

    #[test]
    fn readout_format() {
        let r = WindowedReadout { ae: 1.2449, std: 160.7 };
        assert_eq!(r.to_string(), "AE: 1.24 STD:160.70");
    }

    #[test]
    fn windowed_ae_needs_history() {
        let a = vec![50.0; 20];
        assert!(windowed_ae(&a, &a, 10).is_err());
        let r = windowed_ae(&a, &a, 11).unwrap();
        assert_eq!((r.ae, r.std), (0.0, 0.0));
        let mut p = a.clone();
        p[15] = 53.0;
        p[3] = f64::NAN;
        let r = windowed_ae(&p, &a, 15).unwrap();
        assert!((r.ae - 0.25).abs() < 1e-12);
    }
}
