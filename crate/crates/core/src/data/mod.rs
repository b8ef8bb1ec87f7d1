//! Road networks, speed panels and everything needed to get raw readings into
//! a clean, gridded, split panel.

mod io;
mod network;
mod panel;
mod split;
pub mod synth;
mod trend;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{
    load_coords_csv, load_graph_csv, load_raw_readings_csv, load_speed_csv, write_coords_csv,
    write_graph_csv, write_speed_csv,
};
pub use network::{Edge, RoadNetwork};
pub use panel::{aggregate_5min, fill_missing, RawReading, SpeedPanel, SpeedUnit};
pub use split::{chronological_split, SplitSpec};
pub use trend::{daily_trend, TrendVector};

/// Minutes between consecutive grid cells.
pub const STEP_MINUTES: i64 = 5;
/// Five-minute slots in a day.
pub const SLOTS_PER_DAY: usize = 288;
/// Input and output window length of the forecaster, in steps.
pub const WINDOW: usize = 12;

/// Opaque road / sensor identifier.
///
/// Ordering is "natural": two purely numeric ids compare by value, anything
/// else compares lexically. Tie-breaks throughout the crate use this order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoadId(String);

impl RoadId {
    pub fn new(id: impl Into<String>) -> Self {
        RoadId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RoadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RoadId {
    fn from(s: &str) -> Self {
        RoadId(s.to_owned())
    }
}

impl From<String> for RoadId {
    fn from(s: String) -> Self {
        RoadId(s)
    }
}

fn is_numeric(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

impl Ord for RoadId {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.0.as_str(), other.0.as_str());
        if is_numeric(a) && is_numeric(b) {
            let ta = a.trim_start_matches('0');
            let tb = b.trim_start_matches('0');
            ta.len()
                .cmp(&tb.len())
                .then_with(|| ta.cmp(tb))
                .then_with(|| a.cmp(b))
        } else {
            a.cmp(b)
        }
    }
}

impl PartialOrd for RoadId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
