use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use chrono::{DateTime, Datelike, Duration, Timelike, Utc};
use serde::{Deserialize, Serialize};

use super::{RoadId, SLOTS_PER_DAY, STEP_MINUTES};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedUnit {
    Kmh,
    Mph,
}

impl fmt::Display for SpeedUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpeedUnit::Kmh => "kmh",
            SpeedUnit::Mph => "mph",
        })
    }
}

impl std::str::FromStr for SpeedUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kmh" | "km/h" => Ok(SpeedUnit::Kmh),
            "mph" => Ok(SpeedUnit::Mph),
            other => Err(Error::invalid(format!("unknown speed unit {other:?}"))),
        }
    }
}

/// One irregularly timed reading before gridding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawReading {
    pub timestamp: DateTime<Utc>,
    pub road: RoadId,
    pub speed: f64,
}

/// Per-road speed series on a shared 5-minute grid.
///
/// Missing cells hold `NaN` until [`fill_missing`] runs; `mask` is `true` for
/// every cell that was missing (and therefore imputed afterwards).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedPanel {
    start: DateTime<Utc>,
    unit: SpeedUnit,
    roads: Vec<RoadId>,
    series: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
}

pub(crate) fn is_grid_aligned(ts: &DateTime<Utc>) -> bool {
    ts.second() == 0 && ts.nanosecond() == 0 && ts.minute() as i64 % STEP_MINUTES == 0
}

fn floor_to_grid(ts: &DateTime<Utc>) -> DateTime<Utc> {
    let secs = ts.timestamp();
    let step = STEP_MINUTES * 60;
    DateTime::from_timestamp(secs.div_euclid(step) * step, 0).expect("in-range timestamp")
}

impl SpeedPanel {
    pub fn new(
        start: DateTime<Utc>,
        unit: SpeedUnit,
        roads: Vec<RoadId>,
        series: Vec<Vec<f64>>,
        mask: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if !is_grid_aligned(&start) {
            return Err(Error::invalid(format!("panel start {start} is not on the 5-minute grid")));
        }
        if roads.len() != series.len() || roads.len() != mask.len() {
            return Err(Error::invalid("roads, series and mask counts differ"));
        }
        let len = series.first().map_or(0, Vec::len);
        if series.iter().any(|s| s.len() != len) || mask.iter().any(|m| m.len() != len) {
            return Err(Error::invalid("series lengths differ"));
        }
        let distinct: BTreeSet<&RoadId> = roads.iter().collect();
        if distinct.len() != roads.len() {
            return Err(Error::invalid("duplicate road in panel"));
        }
        Ok(SpeedPanel {
            start,
            unit,
            roads,
            series,
            mask,
        })
    }

    /// Panel built from complete series (empty mask).
    pub fn from_complete(
        start: DateTime<Utc>,
        unit: SpeedUnit,
        roads: Vec<RoadId>,
        series: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mask = series.iter().map(|s| vec![false; s.len()]).collect();
        Self::new(start, unit, roads, series, mask)
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.timestamp(self.len().saturating_sub(1))
    }

    pub fn unit(&self) -> SpeedUnit {
        self.unit
    }

    pub fn roads(&self) -> &[RoadId] {
        &self.roads
    }

    pub fn num_roads(&self) -> usize {
        self.roads.len()
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.series.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn road_index(&self, road: &RoadId) -> Option<usize> {
        self.roads.iter().position(|r| r == road)
    }

    pub fn series(&self, road: usize) -> &[f64] {
        &self.series[road]
    }

    pub fn series_of(&self, road: &RoadId) -> Result<&[f64]> {
        let i = self
            .road_index(road)
            .ok_or_else(|| Error::UnknownRoad(road.to_string()))?;
        Ok(&self.series[i])
    }

    pub fn mask(&self, road: usize) -> &[bool] {
        &self.mask[road]
    }

    pub fn value(&self, road: usize, t: usize) -> f64 {
        self.series[road][t]
    }

    pub fn timestamp(&self, t: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(STEP_MINUTES * t as i64)
    }

    /// Grid index of `ts`, if it lies on the grid inside the panel.
    pub fn index_of_time(&self, ts: &DateTime<Utc>) -> Option<usize> {
        if !is_grid_aligned(ts) || *ts < self.start {
            return None;
        }
        let t = ((*ts - self.start).num_minutes() / STEP_MINUTES) as usize;
        (t < self.len()).then_some(t)
    }

    /// Time-of-day slot (0..288) of step `t`.
    pub fn slot(&self, t: usize) -> usize {
        let first = (self.start.hour() as usize * 60 + self.start.minute() as usize)
            / STEP_MINUTES as usize;
        (first + t) % SLOTS_PER_DAY
    }

    /// Day of week of step `t`, Monday = 0.
    pub fn weekday(&self, t: usize) -> usize {
        self.timestamp(t).weekday().num_days_from_monday() as usize
    }

    pub fn is_complete(&self) -> bool {
        self.series.iter().flatten().all(|v| v.is_finite())
    }

    pub fn imputed_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    /// Contiguous time slice `range` of every road.
    pub fn slice(&self, range: Range<usize>) -> SpeedPanel {
        SpeedPanel {
            start: self.timestamp(range.start),
            unit: self.unit,
            roads: self.roads.clone(),
            series: self.series.iter().map(|s| s[range.clone()].to_vec()).collect(),
            mask: self.mask.iter().map(|m| m[range.clone()].to_vec()).collect(),
        }
    }

    /// The same data with roads in the order given by `order` (indices into `roads`).
    pub fn select_roads(&self, order: &[usize]) -> SpeedPanel {
        SpeedPanel {
            start: self.start,
            unit: self.unit,
            roads: order.iter().map(|&i| self.roads[i].clone()).collect(),
            series: order.iter().map(|&i| self.series[i].clone()).collect(),
            mask: order.iter().map(|&i| self.mask[i].clone()).collect(),
        }
    }

    /// Concatenate two panels of the same roads and unit along time.
    pub fn concat(&self, next: &SpeedPanel) -> Result<SpeedPanel> {
        if self.unit != next.unit {
            return Err(Error::UnitMismatch(self.unit.to_string(), next.unit.to_string()));
        }
        if self.roads != next.roads {
            return Err(Error::invalid("panels cover different roads"));
        }
        if !self.is_empty() && next.start != self.timestamp(self.len()) {
            return Err(Error::invalid("panels are not contiguous"));
        }
        let mut out = self.clone();
        for i in 0..self.roads.len() {
            out.series[i].extend_from_slice(&next.series[i]);
            out.mask[i].extend_from_slice(&next.mask[i]);
        }
        Ok(out)
    }
}

fn is_valid_reading(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

/// Replace missing and erroneous readings with historical means.
///
/// A cell needs filling when it is non-finite or negative. Its replacement is
/// the mean of the same road's valid observations sharing its day of week and
/// time-of-day slot; when no such observation exists the road's overall mean
/// is used. Means are computed from cells that were never imputed, so a
/// second application is a no-op.
pub fn fill_missing(panel: &SpeedPanel) -> Result<SpeedPanel> {
    let mut out = panel.clone();
    let mut empty_roads = Vec::new();
    for (i, road) in panel.roads.iter().enumerate() {
        let values = &panel.series[i];
        let mask = &panel.mask[i];
        if values.iter().all(|&v| is_valid_reading(v)) {
            continue;
        }
        let mut keyed: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        let mut total = (0.0, 0usize);
        for t in 0..values.len() {
            let v = values[t];
            if mask[t] || !is_valid_reading(v) {
                continue;
            }
            let e = keyed.entry((panel.weekday(t), panel.slot(t))).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
            total.0 += v;
            total.1 += 1;
        }
        if total.1 == 0 {
            empty_roads.push(road.to_string());
            continue;
        }
        let global = total.0 / total.1 as f64;
        for t in 0..values.len() {
            if is_valid_reading(values[t]) {
                continue;
            }
            let fill = match keyed.get(&(panel.weekday(t), panel.slot(t))) {
                Some(&(sum, n)) => sum / n as f64,
                None => global,
            };
            out.series[i][t] = fill;
            out.mask[i][t] = true;
        }
    }
    if !empty_roads.is_empty() {
        return Err(Error::NoObservations(empty_roads));
    }
    Ok(out)
}

/// Grid irregular readings into 5-minute means.
///
/// The grid runs from the 5-minute floor of the earliest reading to that of the
/// latest. Each cell is the mean of readings in `[t, t + 5 min)`; cells with
/// no readings are `NaN` and masked. Roads are listed in natural id order and
/// each cell's readings are summed in sorted order so that the result does not
/// depend on input order.
pub fn aggregate_5min(readings: &[RawReading], unit: SpeedUnit) -> Result<SpeedPanel> {
    let Some(first) = readings.iter().map(|r| r.timestamp).min() else {
        return Err(Error::invalid("no readings"));
    };
    let last = readings.iter().map(|r| r.timestamp).max().expect("non-empty");
    let start = floor_to_grid(&first);
    let steps = ((floor_to_grid(&last) - start).num_minutes() / STEP_MINUTES) as usize + 1;

    let roads: Vec<RoadId> = readings
        .iter()
        .map(|r| r.road.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let road_idx: BTreeMap<&RoadId, usize> = roads.iter().enumerate().map(|(i, r)| (r, i)).collect();

    let mut cells: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); steps]; roads.len()];
    for r in readings {
        let t = ((floor_to_grid(&r.timestamp) - start).num_minutes() / STEP_MINUTES) as usize;
        cells[road_idx[&r.road]][t].push(r.speed);
    }
    let mut series = vec![vec![f64::NAN; steps]; roads.len()];
    let mut mask = vec![vec![true; steps]; roads.len()];
    for (i, road_cells) in cells.iter_mut().enumerate() {
        for (t, cell) in road_cells.iter_mut().enumerate() {
            if cell.is_empty() {
                continue;
            }
            cell.sort_by(f64::total_cmp);
            series[i][t] = cell.iter().sum::<f64>() / cell.len() as f64;
            mask[i][t] = false;
        }
    }
    SpeedPanel::new(start, unit, roads, series, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn monday() -> DateTime<Utc> {
        // 2024-01-01 is a Monday.
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn slot_and_weekday_follow_start() {
        let start = Utc.with_ymd_and_hms(2024, 1, 1, 23, 55, 0).unwrap();
        let p = SpeedPanel::from_complete(start, SpeedUnit::Kmh, vec!["a".into()], vec![vec![1.0; 3]])
            .unwrap();
        assert_eq!(p.slot(0), 287);
        assert_eq!(p.slot(1), 0);
        assert_eq!(p.weekday(0), 0);
        assert_eq!(p.weekday(1), 1);
    }

    #[test]
    fn fill_uses_same_weekday_and_slot_mean() {
        // Three Mondays at 09:00 (two observed at 50 and 60, one missing).
        let week = 7 * SLOTS_PER_DAY;
        let t0 = 9 * 12;
        let len = 2 * week + t0 + 1;
        let mut s = vec![40.0; len];
        s[t0] = 50.0;
        s[week + t0] = 60.0;
        s[2 * week + t0] = f64::NAN;
        let mut mask = vec![false; len];
        mask[2 * week + t0] = true;
        let p = SpeedPanel::new(monday(), SpeedUnit::Kmh, vec!["a".into()], vec![s], vec![mask])
            .unwrap();
        let f = fill_missing(&p).unwrap();
        assert_eq!(f.value(0, 2 * week + t0), 55.0);
        assert!(f.mask(0)[2 * week + t0]);
    }

    #[test]
    fn fill_falls_back_to_global_mean() {
        let s = vec![10.0, 20.0, f64::NAN];
        let p = SpeedPanel::new(
            monday(),
            SpeedUnit::Kmh,
            vec!["a".into()],
            vec![s],
            vec![vec![false, false, true]],
        )
        .unwrap();
        let f = fill_missing(&p).unwrap();
        assert_eq!(f.value(0, 2), 15.0);
    }

    #[test]
    fn negative_and_infinite_readings_are_errors_to_fill() {
        let p = SpeedPanel::from_complete(
            monday(),
            SpeedUnit::Kmh,
            vec!["a".into()],
            vec![vec![30.0, -1.0, f64::INFINITY, 50.0]],
        )
        .unwrap();
        let f = fill_missing(&p).unwrap();
        assert_eq!(f.series(0), &[30.0, 40.0, 40.0, 50.0]);
        assert_eq!(f.mask(0), &[false, true, true, false]);
    }

    #[test]
    fn complete_panel_is_unchanged() {
        let p = SpeedPanel::from_complete(monday(), SpeedUnit::Mph, vec!["a".into()], vec![vec![1.0, 2.0]])
            .unwrap();
        assert_eq!(fill_missing(&p).unwrap(), p);
    }

    #[test]
    fn road_without_observations_is_reported() {
        let p = SpeedPanel::new(
            monday(),
            SpeedUnit::Kmh,
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 2.0], vec![f64::NAN, f64::NAN]],
            vec![vec![false, false], vec![true, true]],
        )
        .unwrap();
        match fill_missing(&p) {
            Err(Error::NoObservations(roads)) => assert_eq!(roads, vec!["b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn reading(min: i64, sec: i64, road: &str, speed: f64) -> RawReading {
        RawReading {
            timestamp: monday() + Duration::minutes(min) + Duration::seconds(sec),
            road: road.into(),
            speed,
        }
    }

    #[test]
    fn aggregation_means_and_gaps() {
        let rs = vec![
            reading(0, 10, "a", 40.0),
            reading(4, 59, "a", 60.0),
            reading(5, 0, "a", 33.0),
            reading(15, 1, "a", 20.0),
        ];
        let p = aggregate_5min(&rs, SpeedUnit::Kmh).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.value(0, 0), 50.0);
        assert_eq!(p.value(0, 1), 33.0);
        assert!(p.value(0, 2).is_nan());
        assert!(p.mask(0)[2]);
        assert_eq!(p.value(0, 3), 20.0);
    }

    #[test]
    fn concat_rejects_unit_mismatch() {
        let a = SpeedPanel::from_complete(monday(), SpeedUnit::Kmh, vec!["a".into()], vec![vec![1.0]])
            .unwrap();
        let b = SpeedPanel::from_complete(
            monday() + Duration::minutes(5),
            SpeedUnit::Mph,
            vec!["a".into()],
            vec![vec![1.0]],
        )
        .unwrap();
        assert!(matches!(a.concat(&b), Err(Error::UnitMismatch(..))));
    }
}
