//! View-ready attention products: map arrows, the ST pixel matrix and the
//! head-by-cluster aggregation split by error cohort.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RoadId, SpeedPanel, WINDOW};
use crate::dependency::ClusterAssignment;
use crate::metrics::ErrorCohorts;
use crate::model::{AttentionBundle, Horizon, ModelState, StMatrix, StSource};
use crate::{Error, Result};

/// Arrows below this intensity are hidden by default.
pub const DEFAULT_ATTENTION_THRESHOLD: f64 = 0.1;
/// Windows sampled for the head-cluster view.
pub const HEAD_CLUSTER_WINDOWS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnArrow {
    pub reference: RoadId,
    pub intensity: f64,
}

/// Arrows from a target road to the upstream roads it attends to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnArrowSet {
    pub target: RoadId,
    pub head: Option<usize>,
    pub threshold: f64,
    /// Strongest first; ties by road id.
    pub arrows: Vec<AttnArrow>,
    /// Own-road mass including the sentinel (the donut).
    pub self_reference: f64,
    /// Mass of references below the threshold.
    pub dropped_mass: f64,
}

/// Intensity per reference is the ST mass summed over the 12 past steps.
/// `head = None` uses the head mean.
pub fn attn_arrows(st: &StMatrix, head: Option<usize>, threshold: f64) -> AttnArrowSet {
    let cells = st.cells(head);
    let self_idx = st.references.len() - 1;
    let mut arrows = Vec::new();
    let mut dropped_mass = 0.0;
    for (j, r) in st.references.iter().enumerate().take(self_idx) {
        let intensity: f64 = cells[j].iter().sum();
        if intensity < threshold {
            dropped_mass += intensity;
        } else {
            arrows.push(AttnArrow {
                reference: r.clone(),
                intensity,
            });
        }
    }
    arrows.sort_by(|a, b| b.intensity.total_cmp(&a.intensity).then_with(|| a.reference.cmp(&b.reference)));
    AttnArrowSet {
        target: st.target.clone(),
        head,
        threshold,
        arrows,
        self_reference: cells[self_idx].iter().sum(),
        dropped_mass,
    }
}

/// An ST matrix plus what the pixel view needs to lay it out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StView {
    pub matrix: StMatrix,
    /// Panel step of the most recent input (the cursor).
    pub cursor: usize,
    /// Indices into `matrix.references`, by head-mean intensity descending,
    /// ties by road id.
    pub order: Vec<usize>,
    /// Minutes before the forecast origin for each step row (60 for the
    /// oldest input, 5 for the newest).
    pub minutes_ago: Vec<u32>,
}

/// ST matrix for the window whose newest input step is the panel step at `timestamp`.
pub fn st_matrix_for_view(
    model: &ModelState,
    panel: &SpeedPanel,
    road: &RoadId,
    timestamp: &chrono::DateTime<chrono::Utc>,
    horizon: Horizon,
    source: StSource,
) -> Result<StView> {
    let t = panel
        .index_of_time(timestamp)
        .ok_or_else(|| Error::invalid(format!("timestamp {timestamp} is outside the panel")))?;
    st_view_at(model, panel, road, t, horizon, source)
}

/// As [`st_matrix_for_view`] with the cursor given as a panel step.
pub fn st_view_at(
    model: &ModelState,
    panel: &SpeedPanel,
    road: &RoadId,
    cursor: usize,
    horizon: Horizon,
    source: StSource,
) -> Result<StView> {
    if cursor + 1 < WINDOW || cursor >= panel.len() {
        return Err(Error::invalid(format!(
            "step {cursor} does not have a complete 12-step history"
        )));
    }
    if model.network().index_of(road).is_none() {
        return Err(Error::UnknownRoad(road.to_string()));
    }
    let bundle = model.attention(panel, cursor + 1 - WINDOW)?;
    let matrix = StMatrix::from_bundle(&bundle, road, horizon, source)?;
    Ok(view_of(matrix, cursor))
}

pub(crate) fn view_of(matrix: StMatrix, cursor: usize) -> StView {
    let intensity: Vec<f64> = matrix.mean.iter().map(|r| r.iter().sum()).collect();
    let mut order: Vec<usize> = (0..matrix.references.len()).collect();
    order.sort_by(|&a, &b| {
        intensity[b]
            .total_cmp(&intensity[a])
            .then_with(|| matrix.references[a].cmp(&matrix.references[b]))
    });
    StView {
        matrix,
        cursor,
        order,
        minutes_ago: (0..WINDOW).map(|tau| ((WINDOW - tau) * 5) as u32).collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Every cell divided by the largest cell across all matrices.
    #[default]
    Global,
    /// Every row divided by its sum.
    Local,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Scale::Global),
            "local" => Ok(Scale::Local),
            other => Err(Error::invalid(format!("unknown scale {other:?} (global|local)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    High,
    Low,
}

/// `cells[target cluster][reference cluster]` for one head and cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadClusterMatrix {
    pub head: usize,
    pub cohort: Cohort,
    pub cells: Vec<Vec<f64>>,
    /// Target clusters with no road in this cohort (or no mass); rendered as zeros.
    pub empty_rows: Vec<usize>,
    /// Cohort roads per target cluster.
    pub targets_per_row: Vec<usize>,
}

/// The head-cluster view: all high-error matrices (one per head) then all low-error ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadClusterMatrices {
    pub scale: Scale,
    pub k: usize,
    pub horizon: Horizon,
    pub source: StSource,
    pub windows: usize,
    pub matrices: Vec<HeadClusterMatrix>,
}

impl HeadClusterMatrices {
    /// Same raw aggregation under another scale. Only valid on unscaled input,
    /// so keep the result of [`head_cluster_raw`] around and rescale that.
    pub fn rescaled(raw: &HeadClusterMatrices, scale: Scale) -> HeadClusterMatrices {
        let mut out = raw.clone();
        out.scale = scale;
        match scale {
            Scale::Global => {
                let max = out
                    .matrices
                    .iter()
                    .flat_map(|m| m.cells.iter().flatten())
                    .copied()
                    .fold(0.0, f64::max);
                if max > 0.0 {
                    for m in &mut out.matrices {
                        m.cells.iter_mut().flatten().for_each(|c| *c /= max);
                    }
                }
            }
            Scale::Local => {
                for m in &mut out.matrices {
                    for (i, row) in m.cells.iter_mut().enumerate() {
                        let s: f64 = row.iter().sum();
                        if s > 0.0 {
                            row.iter_mut().for_each(|c| *c /= s);
                        } else if !m.empty_rows.contains(&i) {
                            m.empty_rows.push(i);
                        }
                    }
                    m.empty_rows.sort_unstable();
                }
            }
        }
        out
    }
}

/// Up to `max` distinct window indices out of `available`, seeded, ascending.
pub fn sample_windows(available: usize, max: usize, seed: u64) -> Vec<usize> {
    if available <= max {
        return (0..available).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, available, max).into_vec();
    picked.sort_unstable();
    picked
}

/// Mean ST mass that cohort roads of each cluster put on each cluster, per
/// head, averaged over targets and the given windows. Unscaled; see
/// [`HeadClusterMatrices::rescaled`].
pub fn head_cluster_raw(
    bundles: &[AttentionBundle],
    clusters: &ClusterAssignment,
    cohorts: &ErrorCohorts,
    source: StSource,
) -> Result<HeadClusterMatrices> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::invalid("head-cluster view needs at least one window"))?;
    let heads = first.heads;
    let k = clusters.k;
    let label = |r: &RoadId| {
        clusters
            .label_of(r)
            .ok_or_else(|| Error::invalid(format!("road {r} has no cluster")))
    };
    let road_labels: Vec<usize> = first.roads.iter().map(label).collect::<Result<_>>()?;
    let horizon = cohorts.horizon;

    let mut matrices = Vec::with_capacity(2 * heads);
    for (cohort, members) in [(Cohort::High, &cohorts.high), (Cohort::Low, &cohorts.low)] {
        let mut targets_per_row = vec![0usize; k];
        for r in members.iter() {
            targets_per_row[label(r)?] += 1;
        }
        let mut sums = vec![vec![vec![0.0; k]; k]; heads];
        for bundle in bundles {
            for target in members.iter() {
                let ct = label(target)?;
                let st = StMatrix::from_bundle(bundle, target, horizon, source)?;
                for (h, sum) in sums.iter_mut().enumerate() {
                    for (j, r) in st.references.iter().enumerate() {
                        let cr = road_labels[first.road_index(r).expect("reference in bundle")];
                        sum[ct][cr] += st.per_head[h][j].iter().sum::<f64>();
                    }
                }
            }
        }
        for (h, sum) in sums.into_iter().enumerate() {
            let cells: Vec<Vec<f64>> = sum
                .into_iter()
                .enumerate()
                .map(|(ct, row)| {
                    let n = (targets_per_row[ct] * bundles.len()) as f64;
                    row.into_iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
                })
                .collect();
            matrices.push(HeadClusterMatrix {
                head: h,
                cohort,
                empty_rows: (0..k).filter(|&c| targets_per_row[c] == 0).collect(),
                targets_per_row: targets_per_row.clone(),
                cells,
            });
        }
    }
    Ok(HeadClusterMatrices {
        scale: Scale::Global,
        k,
        horizon,
        source,
        windows: bundles.len(),
        matrices,
    })
}

/// Head-cluster matrices for the given windows of `panel`, at `scale`.
pub fn head_cluster_matrices(
    bundles: &[AttentionBundle],
    clusters: &ClusterAssignment,
    cohorts: &ErrorCohorts,
    source: StSource,
    scale: Scale,
) -> Result<HeadClusterMatrices> {
    let raw = head_cluster_raw(bundles, clusters, cohorts, source)?;
    Ok(HeadClusterMatrices::rescaled(&raw, scale))
}
