//! Immutable analysis snapshots: panel, model and every derived artifact in
//! one directory, indexed by a manifest of content hashes.
//!
//! A snapshot is written to a temporary sibling directory and renamed into
//! place, so a failed build leaves nothing behind. Nothing in it depends on
//! wall-clock time; identical inputs give byte-identical directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attention::{head_cluster_raw, sample_windows, HeadClusterMatrices, HEAD_CLUSTER_WINDOWS};
use crate::data::{chronological_split, daily_trend, RoadId, SpeedPanel, SpeedUnit, SplitSpec, TrendVector};
use crate::dependency::{
    dtw_matrix, elbow_suggest, spectral_cluster, ClusterAssignment, DistanceMatrix, LagCriterion,
    DEFAULT_DTW_WINDOW, DEFAULT_MAX_LAG,
};
use crate::metrics::{compute_errors, quartile_cohorts, ErrorCohorts, ErrorTable, HistoricalAverage};
use crate::model::{load_checkpoint, window_starts, Horizon, ModelState, PredictionPanel, StSource, HORIZONS};
use crate::util::{json_hash, sha256_hex};
use crate::{Error, Result};

pub const SNAPSHOT_FORMAT: &str = "attnlens-snapshot";
pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const PANEL_FILE: &str = "panel.json";
const MODEL_FILE: &str = "model.json";
const DISTANCES_FILE: &str = "distances.json";
const CLUSTERS_FILE: &str = "clusters.json";
const PREDICTIONS_FILE: &str = "predictions.json";
const ERRORS_FILE: &str = "errors.json";
const ERRORS_CSV_FILE: &str = "errors.csv";
const BASELINE_ERRORS_FILE: &str = "baseline_errors.json";
const COHORTS_FILE: &str = "cohorts.json";
const HEAD_CLUSTERS_FILE: &str = "headclusters.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    pub split: SplitSpec,
    pub dtw_window: usize,
    /// Number of clusters; the elbow suggestion when `None`.
    pub clusters: Option<usize>,
    pub k_max: usize,
    pub seed: u64,
    /// Horizon the quartile cohorts are computed at.
    pub horizon: Horizon,
    pub head_cluster_windows: usize,
    pub attention_source: StSource,
    pub max_lag: usize,
    pub lag_criterion: LagCriterion,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        SnapshotConfig {
            split: SplitSpec::default(),
            dtw_window: DEFAULT_DTW_WINDOW,
            clusters: None,
            k_max: 8,
            seed: 0,
            horizon: Horizon::default(),
            head_cluster_windows: HEAD_CLUSTER_WINDOWS,
            attention_source: StSource::default(),
            max_lag: DEFAULT_MAX_LAG,
            lag_criterion: LagCriterion::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: DateTime<Utc>,
    /// Last panel step (inclusive).
    pub end: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub schema_version: u32,
    /// Hash over config, inputs and artifact hashes.
    pub id: String,
    pub dataset: String,
    pub unit: SpeedUnit,
    pub roads: usize,
    pub date_range: DateRange,
    /// Panel step where the test segment (the analysed one) begins.
    pub test_start: usize,
    pub horizons: Vec<Horizon>,
    pub config: SnapshotConfig,
    pub config_hash: String,
    pub model_config_hash: String,
    pub model_seed: u64,
    pub artifacts: BTreeMap<String, ArtifactRef>,
}

/// A loaded snapshot. Immutable; share it behind an `Arc`.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub manifest: Manifest,
    pub panel: SpeedPanel,
    pub train: SpeedPanel,
    pub test: SpeedPanel,
    pub model: ModelState,
    pub distances: DistanceMatrix,
    pub clusters: ClusterAssignment,
    pub predictions: PredictionPanel,
    pub errors: ErrorTable,
    pub baseline_errors: ErrorTable,
    pub cohorts: ErrorCohorts,
    /// Unscaled head-cluster matrices; rescale per request.
    pub head_clusters: HeadClusterMatrices,
    /// 288-slot trends from the training segment, in panel road order.
    pub trends: Vec<TrendVector>,
}

impl Snapshot {
    pub fn id(&self) -> &str {
        &self.manifest.id
    }

    pub fn road_ids(&self) -> &[RoadId] {
        self.panel.roads()
    }

    pub fn trend(&self, road: &RoadId) -> Option<&TrendVector> {
        self.panel.road_index(road).map(|i| &self.trends[i])
    }

    /// Reads and verifies a snapshot directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Snapshot> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&read(&dir.join(MANIFEST_FILE))?)?;
        if manifest.format != SNAPSHOT_FORMAT {
            return Err(Error::Snapshot(format!("{} is not a snapshot manifest", dir.display())));
        }
        if manifest.schema_version != SNAPSHOT_SCHEMA_VERSION {
            return Err(Error::Snapshot(format!(
                "unsupported snapshot schema version {}",
                manifest.schema_version
            )));
        }
        let artifact = |name: &str| -> Result<Vec<u8>> {
            let a = manifest
                .artifacts
                .get(name)
                .ok_or_else(|| Error::Snapshot(format!("manifest lists no {name} artifact")))?;
            let bytes = read(&dir.join(&a.file))?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(Error::Snapshot(format!("{} does not match its manifest hash", a.file)));
            }
            Ok(bytes)
        };
        fn parse<T: DeserializeOwned>(bytes: Vec<u8>) -> Result<T> {
            Ok(serde_json::from_slice(&bytes)?)
        }
        for name in manifest.artifacts.keys() {
            artifact(name)?;
        }
        if manifest.id != snapshot_id(&manifest) {
            return Err(Error::Snapshot("manifest id does not match its contents".into()));
        }

        let panel: SpeedPanel = parse(artifact("panel")?)?;
        let model = {
            let tmp = tempfile::NamedTempFile::new().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            std::fs::write(tmp.path(), artifact("model")?).map_err(|e| Error::io(tmp.path(), e))?;
            load_checkpoint(tmp.path())?
        };
        let (train, _, test) = chronological_split(&panel, &manifest.config.split)?;
        let trends = panel
            .roads()
            .iter()
            .map(|r| daily_trend(&train, r))
            .collect::<Result<_>>()?;
        Ok(Snapshot {
            distances: parse(artifact("distances")?)?,
            clusters: parse(artifact("clusters")?)?,
            predictions: parse(artifact("predictions")?)?,
            errors: parse(artifact("errors")?)?,
            baseline_errors: parse(artifact("baseline_errors")?)?,
            cohorts: parse(artifact("cohorts")?)?,
            head_clusters: parse(artifact("head_clusters")?)?,
            manifest,
            panel,
            train,
            test,
            model,
            trends,
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn snapshot_id(m: &Manifest) -> String {
    json_hash(&(
        &m.format,
        m.schema_version,
        &m.dataset,
        &m.config_hash,
        &m.model_config_hash,
        &m.artifacts,
    ))
}

/// Inputs to [`build_snapshot`]: a dataset name, its (filled) panel and a
/// trained model checkpoint.
#[derive(Clone, Debug)]
pub struct SnapshotInputs {
    pub dataset: String,
    pub panel: SpeedPanel,
    pub checkpoint: PathBuf,
}

/// Runs the analytics and publishes the snapshot at `out`, which must not exist.
pub fn build_snapshot(inputs: &SnapshotInputs, config: &SnapshotConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    if out.exists() {
        return Err(Error::Snapshot(format!("{} already exists; snapshots are immutable", out.display())));
    }
    if !inputs.checkpoint.is_file() {
        return Err(Error::Snapshot(format!(
            "model checkpoint {} not found; train a model first",
            inputs.checkpoint.display()
        )));
    }
    let checkpoint_bytes = read(&inputs.checkpoint)?;
    let model = load_checkpoint(&inputs.checkpoint)?;
    if !model.is_trained() {
        tracing::warn!("building a snapshot from an untrained model");
    }
    let panel = &inputs.panel;
    if !panel.is_complete() {
        return Err(Error::Snapshot("panel has missing cells; fill it before building".into()));
    }
    if panel.num_roads() != model.num_roads() {
        return Err(Error::Snapshot(format!(
            "panel has {} roads, the model graph {}",
            panel.num_roads(),
            model.num_roads()
        )));
    }

    let (train, _, test) = chronological_split(panel, &config.split)?;
    tracing::info!("dtw");
    let ids = train.roads().to_vec();
    let trends: Vec<TrendVector> = ids.iter().map(|r| daily_trend(&train, r)).collect::<Result<_>>()?;
    let distances = dtw_matrix(&ids, &trends, config.dtw_window)?;

    tracing::info!("clustering");
    let k_max = config.k_max.min(ids.len().saturating_sub(1));
    let elbow = elbow_suggest(&distances, k_max, config.seed)?;
    let k = config.clusters.unwrap_or(elbow.suggested_k);
    let mut clusters = spectral_cluster(&distances, k, config.seed)?;
    clusters.elbow = elbow.curve;

    tracing::info!("errors");
    let starts = window_starts(test.len(), true);
    if starts.is_empty() {
        return Err(Error::Snapshot("test segment is too short for a single forecast window".into()));
    }
    let predictions = model.predict(&test, &starts)?;
    let errors = compute_errors(&predictions, &test)?;
    let baseline = HistoricalAverage::fit(&train).predict(&test, &starts)?;
    let baseline_errors = compute_errors(&baseline, &test)?;
    let cohorts = quartile_cohorts(&errors, config.horizon)?;

    tracing::info!("head clusters");
    let attn_starts = window_starts(test.len(), false);
    let picked: Vec<usize> = sample_windows(attn_starts.len(), config.head_cluster_windows, config.seed)
        .into_iter()
        .map(|i| attn_starts[i])
        .collect();
    let bundles = model.attention_many(&test, &picked)?;
    let head_clusters = head_cluster_raw(&bundles, &clusters, &cohorts, config.attention_source)?;

    let mut files: Vec<(&str, &str, Vec<u8>)> = vec![
        ("panel", PANEL_FILE, serde_json::to_vec(panel)?),
        ("model", MODEL_FILE, checkpoint_bytes),
        ("distances", DISTANCES_FILE, serde_json::to_vec(&distances)?),
        ("clusters", CLUSTERS_FILE, serde_json::to_vec(&clusters)?),
        ("predictions", PREDICTIONS_FILE, serde_json::to_vec(&predictions)?),
        ("errors", ERRORS_FILE, serde_json::to_vec(&errors)?),
        ("baseline_errors", BASELINE_ERRORS_FILE, serde_json::to_vec(&baseline_errors)?),
        ("cohorts", COHORTS_FILE, serde_json::to_vec(&cohorts)?),
        ("head_clusters", HEAD_CLUSTERS_FILE, serde_json::to_vec(&head_clusters)?),
    ];
    let mut csv = Vec::new();
    errors.write_csv(&mut csv)?;
    files.push(("errors_csv", ERRORS_CSV_FILE, csv));

    let artifacts: BTreeMap<String, ArtifactRef> = files
        .iter()
        .map(|(name, file, bytes)| {
            (
                name.to_string(),
                ArtifactRef {
                    file: file.to_string(),
                    sha256: sha256_hex(bytes),
                },
            )
        })
        .collect();
    let mut manifest = Manifest {
        format: SNAPSHOT_FORMAT.into(),
        schema_version: SNAPSHOT_SCHEMA_VERSION,
        id: String::new(),
        dataset: inputs.dataset.clone(),
        unit: panel.unit(),
        roads: panel.num_roads(),
        date_range: DateRange {
            start: panel.start(),
            end: panel.timestamp(panel.len() - 1),
        },
        test_start: panel.len() - test.len(),
        horizons: HORIZONS.to_vec(),
        config: config.clone(),
        config_hash: json_hash(config),
        model_config_hash: json_hash(model.config()),
        model_seed: model.config().seed,
        artifacts,
    };
    manifest.id = snapshot_id(&manifest);
    files.push(("manifest", MANIFEST_FILE, serde_json::to_vec_pretty(&manifest)?));

    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".snapshot-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    for (_, file, bytes) in &files {
        let path = staging.path().join(file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let staged = staging.keep();
    if let Err(e) = std::fs::rename(&staged, out) {
        let _ = std::fs::remove_dir_all(&staged);
        return Err(Error::io(out, e));
    }
    tracing::info!(id = %manifest.id, "snapshot published at {}", out.display());
    Ok(manifest)
}
