//! Trend similarity, trend clusters and lead/lag tests between roads.
//!
//! DTW runs on z-normalised 288-slot daily trends, spectral clustering runs on
//! the resulting distance matrix, and Granger tests run on the raw 5-minute
//! series.

mod cluster;
mod dtw;
mod granger;

pub use cluster::{adjusted_rand_index, elbow_suggest, spectral_cluster, ClusterAssignment, ElbowPoint, ElbowResult};
pub use dtw::{dtw_distance, dtw_matrix, dtw_raw, znormalize, DistanceMatrix, DEFAULT_DTW_WINDOW};
pub use granger::{
    causality_scan, causality_scan_with, granger_pairs, granger_pairs_with, granger_test, granger_test_with,
    CausalityResult, GrangerTest, LagCriterion, DEFAULT_MAX_LAG, SIGNIFICANCE,
};
