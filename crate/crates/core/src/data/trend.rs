use serde::{Deserialize, Serialize};

use super::{RoadId, SpeedPanel, SLOTS_PER_DAY};
use crate::{Error, Result};

/// Mean speed per 5-minute time-of-day slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendVector {
    pub slots: Vec<f64>,
    pub support: Vec<usize>,
}

impl TrendVector {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Daily trend of `road` over the whole of `panel` (pass the training range).
///
/// Slots with at least one observed cell average observed cells only; slots
/// seen only through imputed cells average those instead. A slot the panel
/// never covers takes the road's overall mean with zero support.
pub fn daily_trend(panel: &SpeedPanel, road: &RoadId) -> Result<TrendVector> {
    let i = panel
        .road_index(road)
        .ok_or_else(|| Error::UnknownRoad(road.to_string()))?;
    let values = panel.series(i);
    let mask = panel.mask(i);
    let mut observed = vec![(0.0, 0usize); SLOTS_PER_DAY];
    let mut imputed = vec![(0.0, 0usize); SLOTS_PER_DAY];
    for (t, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let acc = if mask[t] { &mut imputed } else { &mut observed };
        let s = panel.slot(t);
        acc[s].0 += v;
        acc[s].1 += 1;
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let overall = if finite.is_empty() {
        0.0
    } else {
        crate::util::mean(&finite)
    };
    let mut slots = Vec::with_capacity(SLOTS_PER_DAY);
    let mut support = Vec::with_capacity(SLOTS_PER_DAY);
    for s in 0..SLOTS_PER_DAY {
        let (sum, n) = if observed[s].1 > 0 { observed[s] } else { imputed[s] };
        if n > 0 {
            slots.push(sum / n as f64);
        } else {
            slots.push(overall);
        }
        support.push(n);
    }
    Ok(TrendVector { slots, support })
}
