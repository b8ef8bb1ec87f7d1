//! Enforcement jobs: validated up front, run on a bounded pool of blocking
//! workers, results kept by job id.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use attnlens_core::enforcement::{plan_enforcement, run_alternative_inference, EnforcementConfig, EnforcementReport, TargetPool};
use attnlens_core::model::{window_starts, Horizon};
use attnlens_core::snapshot::Snapshot;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::ApiError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnforceRequest {
    pub clusters: Vec<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub horizon: Option<Horizon>,
    #[serde(default = "default_per_head")]
    pub per_head: bool,
    /// Use this fraction of highest-MAE roads instead of the MAE > Q3 cohort.
    #[serde(default)]
    pub top_fraction: Option<f64>,
    /// Evaluate every `stride`-th test window.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_k() -> usize {
    3
}

fn default_alpha() -> f64 {
    0.5
}

fn default_per_head() -> bool {
    true
}

fn default_stride() -> usize {
    1
}

impl EnforceRequest {
    pub fn config(&self, snapshot: &Snapshot) -> Result<EnforcementConfig, ApiError> {
        if self.stride == 0 {
            return Err(ApiError::bad_request("stride must be at least 1"));
        }
        let config = EnforcementConfig {
            clusters: self.clusters.clone(),
            k: self.k,
            alpha: self.alpha,
            horizon: self.horizon.unwrap_or(snapshot.cohorts.horizon),
            pool: match self.top_fraction {
                Some(f) => TargetPool::TopFraction(f),
                None => TargetPool::HighCohort,
            },
            per_head: self.per_head,
            max_lag: snapshot.manifest.config.max_lag,
        };
        config.validate()?;
        if let Some(c) = self.clusters.iter().find(|&&c| c >= snapshot.clusters.k) {
            return Err(ApiError::bad_request(format!(
                "cluster {c} does not exist (k = {})",
                snapshot.clusters.k
            )));
        }
        Ok(config)
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "lowercase", tag = "status")]
pub enum JobState {
    Queued,
    Running,
    Done { report: Box<EnforcementReport> },
    Failed { error: String },
}

pub struct JobPool {
    permits: Arc<Semaphore>,
    jobs: RwLock<BTreeMap<u64, JobState>>,
    next: std::sync::atomic::AtomicU64,
}

impl JobPool {
    pub fn new(workers: usize) -> Self {
        JobPool {
            permits: Arc::new(Semaphore::new(workers.max(1))),
            jobs: RwLock::new(BTreeMap::new()),
            next: std::sync::atomic::AtomicU64::new(1),
        }
    }

    pub fn get(&self, id: u64) -> Option<JobState> {
        self.jobs.read().expect("job table").get(&id).cloned()
    }

    fn set(&self, id: u64, state: JobState) {
        self.jobs.write().expect("job table").insert(id, state);
    }

    /// Queues a job and returns its id.
    pub fn submit(self: &Arc<Self>, snapshot: Arc<Snapshot>, config: EnforcementConfig, stride: usize) -> u64 {
        let id = self.next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.set(id, JobState::Queued);
        let pool = Arc::clone(self);
        tokio::spawn(async move {
            let Ok(_permit) = pool.permits.clone().acquire_owned().await else {
                return;
            };
            pool.set(id, JobState::Running);
            let result = tokio::task::spawn_blocking(move || run_enforcement(&snapshot, &config, stride)).await;
            let state = match result {
                Ok(Ok(report)) => JobState::Done {
                    report: Box::new(report),
                },
                Ok(Err(e)) => JobState::Failed { error: e.to_string() },
                Err(e) => JobState::Failed {
                    error: format!("worker panicked: {e}"),
                },
            };
            if let JobState::Failed { error } = &state {
                tracing::warn!(job = id, "enforcement job failed: {error}");
            }
            pool.set(id, state);
        });
        id
    }
}

/// Plans and evaluates one enforcement run on the snapshot's test segment,
/// every `stride`-th window.
pub fn run_enforcement(snapshot: &Snapshot, config: &EnforcementConfig, stride: usize) -> attnlens_core::Result<EnforcementReport> {
    let plan = plan_enforcement(
        config,
        &snapshot.errors,
        &snapshot.cohorts,
        &snapshot.clusters,
        &snapshot.distances,
        &snapshot.train,
    )?;
    let starts: Vec<usize> = window_starts(snapshot.test.len(), true)
        .into_iter()
        .step_by(stride.max(1))
        .collect();
    run_alternative_inference(&snapshot.model, &plan, &snapshot.test, &starts, None)
}
