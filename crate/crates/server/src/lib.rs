//! HTTP JSON API over one immutable analysis snapshot.
//!
//! Every GET handler is a pure function of the snapshot and the query, so
//! repeated requests return identical bytes. Attention views and causality
//! scans are computed on first request and cached; the cached values are
//! deterministic, so racing inserts are harmless.

mod error;
mod jobs;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use attnlens_core::attention::{attn_arrows, st_view_at, AttnArrowSet, HeadClusterMatrices, Scale, StView, DEFAULT_ATTENTION_THRESHOLD};
use attnlens_core::data::{RoadId, SpeedPanel, TrendVector, SLOTS_PER_DAY};
use attnlens_core::dependency::{causality_scan_with, CausalityResult, ClusterAssignment};
use attnlens_core::metrics::{mae_filter, speed_histogram, windowed_ae, SpeedHistogram, WindowedReadout};
use attnlens_core::model::{Horizon, StSource};
use attnlens_core::snapshot::{DateRange, Snapshot};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use error::ApiError;
pub use jobs::{run_enforcement, EnforceRequest, JobPool, JobState};

/// Version of every response body's schema.
pub const API_SCHEMA_VERSION: u32 = 1;
/// Bin width of the per-road speed histograms, in the panel's unit.
pub const HISTOGRAM_BIN: f64 = 5.0;

type AttnKey = (usize, usize, Horizon, StSource);

pub struct AppState {
    snapshot: Arc<Snapshot>,
    attention: RwLock<HashMap<AttnKey, Arc<StView>>>,
    causality: RwLock<HashMap<usize, Arc<Vec<CausalityResult>>>>,
    jobs: Arc<JobPool>,
}

impl AppState {
    pub fn new(snapshot: Snapshot, workers: usize) -> Arc<Self> {
        Arc::new(AppState {
            snapshot: Arc::new(snapshot),
            attention: RwLock::new(HashMap::new()),
            causality: RwLock::new(HashMap::new()),
            jobs: Arc::new(JobPool::new(workers)),
        })
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    fn road(&self, id: &str) -> Result<(usize, RoadId), ApiError> {
        let road = RoadId::new(id);
        self.snapshot
            .panel
            .road_index(&road)
            .map(|i| (i, road))
            .ok_or_else(|| ApiError::not_found("unknown_road", format!("unknown road {id}")))
    }

    /// Test-panel step of a timestamp.
    fn step(&self, ts: &str) -> Result<usize, ApiError> {
        let parsed: DateTime<Utc> = ts
            .parse()
            .map_err(|e| ApiError::bad_request(format!("malformed timestamp {ts:?}: {e}")))?;
        self.snapshot
            .test
            .index_of_time(&parsed)
            .ok_or_else(|| ApiError::not_found("unknown_timestamp", format!("{ts} is not a step of the analysed range")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/snapshot", get(snapshot_meta))
        .route("/roads", get(roads))
        .route("/roads/{id}/trend", get(trend))
        .route("/roads/{id}/series", get(series))
        .route("/roads/{id}/attention", get(attention))
        .route("/roads/{id}/causality", get(causality))
        .route("/clusters", get(clusters))
        .route("/headclusters", get(head_clusters))
        .route("/enforce", post(enforce))
        .route("/enforce/{job}", get(job))
        .fallback(|| async { ApiError::not_found("no_route", "no such endpoint") })
        .with_state(state)
}

/// Serves until the process is interrupted.
pub async fn serve(snapshot: Snapshot, addr: SocketAddr, workers: usize) -> std::io::Result<()> {
    let state = AppState::new(snapshot, workers);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("serving snapshot {} on {}", state.snapshot.id(), listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Serialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

fn ok<T: Serialize>(body: T) -> Json<Versioned<T>> {
    Json(Versioned {
        schema_version: API_SCHEMA_VERSION,
        body,
    })
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(t)| t).map_err(|e| ApiError::bad_request(e.body_text()))
}

#[derive(Serialize)]
struct Quartiles {
    horizon: Horizon,
    q1: f64,
    q3: f64,
}

#[derive(Serialize)]
struct SnapshotMeta<'a> {
    id: &'a str,
    dataset: &'a str,
    unit: String,
    roads: usize,
    date_range: &'a DateRange,
    /// Range the cursor, series and attention endpoints accept.
    analysed_range: DateRange,
    horizons: Vec<u32>,
    default_horizon: Horizon,
    quartiles: Quartiles,
    clusters: usize,
    speed_min: f64,
    speed_max: f64,
    model_trained: bool,
    attention_threshold: f64,
}

async fn snapshot_meta(State(s): State<Arc<AppState>>) -> impl IntoResponse {
    let snap = &s.snapshot;
    let speeds = (0..snap.panel.num_roads()).flat_map(|r| snap.panel.series(r).iter().copied());
    let (lo, hi) = speeds.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    ok(SnapshotMeta {
        id: snap.id(),
        dataset: &snap.manifest.dataset,
        unit: snap.panel.unit().to_string(),
        roads: snap.panel.num_roads(),
        date_range: &snap.manifest.date_range,
        analysed_range: DateRange {
            start: snap.test.start(),
            end: snap.test.end(),
        },
        horizons: snap.manifest.horizons.iter().map(|h| h.minutes()).collect(),
        default_horizon: Horizon::default(),
        quartiles: Quartiles {
            horizon: snap.cohorts.horizon,
            q1: snap.cohorts.q1,
            q3: snap.cohorts.q3,
        },
        clusters: snap.clusters.k,
        speed_min: lo,
        speed_max: hi,
        model_trained: snap.model.is_trained(),
        attention_threshold: DEFAULT_ATTENTION_THRESHOLD,
    })
    .into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RoadsQuery {
    horizon: Option<Horizon>,
    mae_threshold: Option<f64>,
}

#[derive(Serialize)]
struct RoadRow {
    id: RoadId,
    /// `[x, y]` map coordinates when known.
    coords: Option<(f64, f64)>,
    cluster: Option<usize>,
    /// MAE per horizon in minutes.
    mae: BTreeMap<u32, Option<f64>>,
    average_mae: Option<f64>,
    cohort: Option<&'static str>,
    /// MAE at the query horizon exceeds `mae_threshold`.
    above_threshold: Option<bool>,
    speed_std: f64,
    histogram: SpeedHistogram,
}

#[derive(Serialize)]
struct RoadsBody {
    horizon: Horizon,
    mae_threshold: Option<f64>,
    roads: Vec<RoadRow>,
}

async fn roads(State(s): State<Arc<AppState>>, q: Result<Query<RoadsQuery>, QueryRejection>) -> Result<impl IntoResponse, ApiError> {
    let q = query(q)?;
    let snap = &s.snapshot;
    let horizon = q.horizon.unwrap_or(snap.cohorts.horizon);
    if let Some(t) = q.mae_threshold {
        if !t.is_finite() {
            return Err(ApiError::bad_request("mae_threshold must be finite"));
        }
    }
    let above = q.mae_threshold.map(|t| mae_filter(&snap.errors, horizon, t));
    let rows = snap
        .panel
        .roads()
        .iter()
        .map(|id| {
            let errors = snap.errors.road(id);
            let histogram = speed_histogram(&snap.panel, id, HISTOGRAM_BIN)?;
            Ok(RoadRow {
                id: id.clone(),
                coords: snap.model.network().coords(id),
                cluster: snap.clusters.label_of(id),
                mae: snap
                    .manifest
                    .horizons
                    .iter()
                    .map(|&h| (h.minutes(), snap.errors.mae(id, h)))
                    .collect(),
                average_mae: errors.and_then(|e| e.average_mae),
                cohort: if snap.cohorts.is_high(id) {
                    Some("high")
                } else if snap.cohorts.is_low(id) {
                    Some("low")
                } else {
                    None
                },
                above_threshold: above.as_ref().map(|a| a.contains(id)),
                speed_std: histogram.std,
                histogram,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(ok(RoadsBody {
        horizon,
        mae_threshold: q.mae_threshold,
        roads: rows,
    }))
}

#[derive(Serialize)]
struct TrendBody<'a> {
    road: RoadId,
    slots_per_day: usize,
    trend: &'a TrendVector,
}

async fn trend(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let (i, road) = s.road(&id)?;
    Ok(ok(TrendBody {
        road,
        slots_per_day: SLOTS_PER_DAY,
        trend: &s.snapshot.trends[i],
    })
    .into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesQuery {
    from: Option<String>,
    to: Option<String>,
    horizon: Option<Horizon>,
    cursor: Option<String>,
}

#[derive(Serialize)]
struct SeriesPoint {
    timestamp: DateTime<Utc>,
    actual: f64,
    imputed: bool,
    predicted: Option<f64>,
}

#[derive(Serialize)]
struct CursorReadout {
    timestamp: DateTime<Utc>,
    #[serde(flatten)]
    readout: WindowedReadout,
    label: String,
}

#[derive(Serialize)]
struct SeriesBody {
    road: RoadId,
    horizon: Horizon,
    points: Vec<SeriesPoint>,
    cursor: Option<CursorReadout>,
}

async fn series(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    q: Result<Query<SeriesQuery>, QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let q = query(q)?;
    let (r, road) = s.road(&id)?;
    let snap = &s.snapshot;
    let test: &SpeedPanel = &snap.test;
    let horizon = q.horizon.unwrap_or_default();
    let from = q.from.as_deref().map(|t| s.step(t)).transpose()?.unwrap_or(0);
    let to = q.to.as_deref().map(|t| s.step(t)).transpose()?.unwrap_or(test.len() - 1);
    if from > to {
        return Err(ApiError::bad_request("`from` is after `to`"));
    }
    let pr = snap
        .predictions
        .road_index(&road)
        .ok_or_else(|| ApiError::internal("road missing from predictions"))?;
    let mut predicted = vec![f64::NAN; test.len()];
    for (step, v) in snap.predictions.horizon_series(pr, horizon) {
        predicted[step] = v;
    }
    let actual = test.series(r);
    let points = (from..=to)
        .map(|t| SeriesPoint {
            timestamp: test.timestamp(t),
            actual: actual[t],
            imputed: test.mask(r)[t],
            predicted: predicted[t].is_finite().then_some(predicted[t]),
        })
        .collect();
    let cursor = match q.cursor.as_deref() {
        None => None,
        Some(c) => {
            let t = s.step(c)?;
            let readout = windowed_ae(&predicted, actual, t)?;
            Some(CursorReadout {
                timestamp: test.timestamp(t),
                label: readout.to_string(),
                readout,
            })
        }
    };
    Ok(ok(SeriesBody {
        road,
        horizon,
        points,
        cursor,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionQuery {
    t: String,
    horizon: Option<Horizon>,
    head: Option<usize>,
    threshold: Option<f64>,
    source: Option<StSource>,
}

#[derive(Serialize)]
struct AttentionBody<'a> {
    road: RoadId,
    timestamp: DateTime<Utc>,
    head: Option<usize>,
    st: &'a StView,
    arrows: AttnArrowSet,
}

async fn attention(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    q: Result<Query<AttentionQuery>, QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let q = query(q)?;
    let (r, road) = s.road(&id)?;
    let cursor = s.step(&q.t)?;
    let horizon = q.horizon.unwrap_or_default();
    let source = q.source.unwrap_or_default();
    let threshold = q.threshold.unwrap_or(DEFAULT_ATTENTION_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError::bad_request("threshold must lie in [0, 1]"));
    }
    if let Some(h) = q.head {
        if h >= s.snapshot.model.heads() {
            return Err(ApiError::bad_request(format!(
                "head {h} out of range (model has {})",
                s.snapshot.model.heads()
            )));
        }
    }
    let key = (r, cursor, horizon, source);
    let cached = s.attention.read().expect("attention cache").get(&key).cloned();
    let view = match cached {
        Some(v) => v,
        None => {
            let state = Arc::clone(&s);
            let road = road.clone();
            let view = tokio::task::spawn_blocking(move || {
                let snap = &state.snapshot;
                st_view_at(&snap.model, &snap.test, &road, cursor, horizon, source)
            })
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(|e| match e {
                attnlens_core::Error::Invalid(m) => ApiError::not_found("no_history", m),
                other => other.into(),
            })?;
            let view = Arc::new(view);
            s.attention.write().expect("attention cache").insert(key, Arc::clone(&view));
            view
        }
    };
    let arrows = attn_arrows(&view.matrix, q.head, threshold);
    let body = AttentionBody {
        road,
        timestamp: s.snapshot.test.timestamp(cursor),
        head: q.head,
        st: &view,
        arrows,
    };
    Ok(ok(body).into_response())
}

#[derive(Serialize)]
struct CausalityBody<'a> {
    road: RoadId,
    max_lag: usize,
    results: &'a [CausalityResult],
    /// `F[L,dof]=..., p=...` lines in result order.
    labels: Vec<String>,
}

async fn causality(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let (r, road) = s.road(&id)?;
    let cached = s.causality.read().expect("causality cache").get(&r).cloned();
    let results = match cached {
        Some(v) => v,
        None => {
            let state = Arc::clone(&s);
            let target = road.clone();
            let results = tokio::task::spawn_blocking(move || {
                let snap = &state.snapshot;
                let cfg = &snap.manifest.config;
                causality_scan_with(&target, snap.panel.roads(), &snap.train, cfg.max_lag, cfg.lag_criterion)
            })
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
            let results = Arc::new(results);
            s.causality.write().expect("causality cache").insert(r, Arc::clone(&results));
            results
        }
    };
    let labels = results.iter().map(|c| format!("{}: {}", c.cause, c.test)).collect();
    Ok(ok(CausalityBody {
        road,
        max_lag: s.snapshot.manifest.config.max_lag,
        results: &results,
        labels,
    })
    .into_response())
}

#[derive(Serialize)]
struct ClustersBody<'a> {
    #[serde(flatten)]
    assignment: &'a ClusterAssignment,
    members: Vec<Vec<RoadId>>,
}

async fn clusters(State(s): State<Arc<AppState>>) -> impl IntoResponse {
    let c = &s.snapshot.clusters;
    ok(ClustersBody {
        assignment: c,
        members: (0..c.k).map(|k| c.members(k)).collect(),
    })
    .into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadClusterQuery {
    scale: Option<Scale>,
}

async fn head_clusters(
    State(s): State<Arc<AppState>>,
    q: Result<Query<HeadClusterQuery>, QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let q = query(q)?;
    Ok(ok(HeadClusterMatrices::rescaled(&s.snapshot.head_clusters, q.scale.unwrap_or_default())))
}

#[derive(Serialize)]
struct JobCreated {
    job: u64,
    status: &'static str,
}

async fn enforce(
    State(s): State<Arc<AppState>>,
    body: Result<Json<EnforceRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let config = req.config(&s.snapshot)?;
    let job = s.jobs.submit(Arc::clone(&s.snapshot), config, req.stride);
    Ok((StatusCode::ACCEPTED, ok(JobCreated { job, status: "queued" })))
}

#[derive(Serialize)]
struct JobBody {
    job: u64,
    #[serde(flatten)]
    state: JobState,
}

async fn job(State(s): State<Arc<AppState>>, Path(job): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let id: u64 = job
        .parse()
        .map_err(|_| ApiError::bad_request(format!("malformed job id {job:?}")))?;
    let state = s
        .jobs
        .get(id)
        .ok_or_else(|| ApiError::not_found("unknown_job", format!("no job {id}")))?;
    Ok(ok(JobBody { job: id, state }))
}
