//! Attention enforcement: replace high-error roads' attention with a profile
//! taken from a well-predicted reference road and re-run inference.
//!
//! The enforced row of a target copies the reference's own-road (self plus
//! sentinel) temporal profile onto the target's own slot and gives the rest
//! of the mass to the reference road itself, spread over the steps like the
//! reference's whole row. Nothing else is modified.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{RoadId, SpeedPanel, WINDOW};
use crate::dependency::{granger_pairs, ClusterAssignment, DistanceMatrix, GrangerTest};
use crate::metrics::{absolute_errors, compute_errors, top_error_fraction, ErrorCohorts, ErrorTable};
use crate::model::{AttentionBundle, Horizon, ModelState, PatchFn, PredictionPanel, StEntry, StRows, HORIZONS};
use crate::{Error, Result};

/// Which high-error roads are eligible as targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "fraction")]
pub enum TargetPool {
    /// The MAE > Q3 cohort.
    #[default]
    HighCohort,
    /// The given fraction of all roads with the highest MAE.
    TopFraction(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnforcementConfig {
    pub clusters: Vec<usize>,
    pub k: usize,
    pub alpha: f64,
    pub horizon: Horizon,
    pub pool: TargetPool,
    /// Enforce head by head; otherwise every head gets the head-mean row.
    pub per_head: bool,
    pub max_lag: usize,
}

impl Default for EnforcementConfig {
    fn default() -> Self {
        EnforcementConfig {
            clusters: Vec::new(),
            k: 3,
            alpha: 0.5,
            horizon: Horizon::default(),
            pool: TargetPool::HighCohort,
            per_head: true,
            max_lag: crate::dependency::DEFAULT_MAX_LAG,
        }
    }
}

impl EnforcementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::invalid("select at least one cluster"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        if let TargetPool::TopFraction(f) = self.pool {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid("top fraction must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// A selected target road with its cluster and MAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub road: RoadId,
    pub cluster: usize,
    pub mae: f64,
}

/// Per selected cluster, the `k` highest-MAE roads among `eligible`, ties by road id.
pub fn select_targets(
    maes: &[(RoadId, f64)],
    eligible: &[RoadId],
    clusters: &ClusterAssignment,
    selected: &[usize],
    k: usize,
) -> Result<Vec<Target>> {
    if selected.is_empty() {
        return Err(Error::invalid("select at least one cluster"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if let Some(c) = selected.iter().find(|&&c| c >= clusters.k) {
        return Err(Error::invalid(format!("cluster {c} does not exist (k = {})", clusters.k)));
    }
    let eligible: BTreeSet<&RoadId> = eligible.iter().collect();
    let mut out = Vec::new();
    let selected: BTreeSet<usize> = selected.iter().copied().collect();
    for c in selected {
        let mut members: Vec<Target> = maes
            .iter()
            .filter(|(r, _)| eligible.contains(r) && clusters.label_of(r) == Some(c))
            .map(|(r, m)| Target {
                road: r.clone(),
                cluster: c,
                mae: *m,
            })
            .collect();
        members.sort_by(|a, b| b.mae.total_cmp(&a.mae).then_with(|| a.road.cmp(&b.road)));
        out.extend(members.into_iter().take(k));
    }
    if out.is_empty() {
        tracing::warn!("no high-error roads in the selected clusters; the plan is empty");
    }
    Ok(out)
}

/// Score breakdown of one candidate reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScore {
    pub road: RoadId,
    pub score: f64,
    pub dtw_component: f64,
    pub granger_component: f64,
    pub dtw_distance: f64,
    pub granger: Option<GrangerTest>,
}

/// Best reference for `target` among `candidates` plus every candidate's score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceChoice {
    pub best: ReferenceScore,
    pub scores: Vec<ReferenceScore>,
    pub warning: Option<String>,
}

/// `score = α (1 - d / max d) + (1 - α) F / max F`, with the Granger term 0
/// for candidates that are not significant (or untestable). Ties go to the
/// smaller DTW distance, then the smaller road id.
pub fn find_reference(
    target: &RoadId,
    candidates: &[RoadId],
    d: &DistanceMatrix,
    panel: &SpeedPanel,
    alpha: f64,
    max_lag: usize,
) -> Result<ReferenceChoice> {
    let candidates: Vec<RoadId> = candidates.iter().filter(|c| *c != target).cloned().collect();
    if candidates.is_empty() {
        return Err(Error::invalid(format!("no reference candidates for {target}")));
    }
    let dist = candidates
        .iter()
        .map(|c| d.get(target, c).ok_or_else(|| Error::UnknownRoad(c.to_string())))
        .collect::<Result<Vec<f64>>>()?;
    let tests = granger_pairs(target, &candidates, panel, max_lag)?;
    let granger: Vec<Option<GrangerTest>> = candidates
        .iter()
        .map(|c| tests.iter().find(|t| &t.cause == c).map(|t| t.test.clone()))
        .collect();
    let sig_f: Vec<f64> = granger
        .iter()
        .map(|g| g.as_ref().filter(|g| g.significant()).map_or(0.0, |g| g.f_value))
        .collect();
    let max_d = dist.iter().copied().fold(0.0, f64::max);
    let max_f = sig_f.iter().copied().fold(0.0, f64::max);
    let scores: Vec<ReferenceScore> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let sim_d = if max_d > 0.0 { 1.0 - dist[i] / max_d } else { 1.0 };
            let sim_g = if max_f > 0.0 { sig_f[i] / max_f } else { 0.0 };
            ReferenceScore {
                road: c.clone(),
                score: alpha * sim_d + (1.0 - alpha) * sim_g,
                dtw_component: sim_d,
                granger_component: sim_g,
                dtw_distance: dist[i],
                granger: granger[i].clone(),
            }
        })
        .collect();
    let best = scores
        .iter()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.dtw_distance.total_cmp(&b.dtw_distance))
                .then_with(|| a.road.cmp(&b.road))
        })
        .expect("non-empty")
        .clone();
    let warning = (max_f == 0.0 && dist.iter().all(|&x| x == dist[0])).then(|| {
        format!("no candidate separates for {target}; picked {} by road id", best.road)
    });
    if let Some(w) = &warning {
        tracing::warn!("{w}");
    }
    Ok(ReferenceChoice { best, scores, warning })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedTarget {
    pub target: Target,
    pub reference: ReferenceScore,
    /// Candidates came from the target's own cluster.
    pub same_cluster: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnforcementPlan {
    pub config: EnforcementConfig,
    pub targets: Vec<PlannedTarget>,
    pub warnings: Vec<String>,
}

/// Targets and their references. Candidates are low-error roads of the
/// target's cluster, or all low-error roads when that cluster has none.
pub fn plan_enforcement(
    config: &EnforcementConfig,
    table: &ErrorTable,
    cohorts: &ErrorCohorts,
    clusters: &ClusterAssignment,
    d: &DistanceMatrix,
    panel: &SpeedPanel,
) -> Result<EnforcementPlan> {
    config.validate()?;
    let maes = table.maes(config.horizon);
    let eligible = match config.pool {
        TargetPool::HighCohort => cohorts.high.clone(),
        TargetPool::TopFraction(f) => top_error_fraction(table, config.horizon, f),
    };
    let targets = select_targets(&maes, &eligible, clusters, &config.clusters, config.k)?;
    let mut warnings = Vec::new();
    if targets.is_empty() {
        warnings.push("no high-error roads in the selected clusters".to_string());
    }
    if cohorts.low.is_empty() && !targets.is_empty() {
        return Err(Error::invalid("the low-error cohort is empty; no references available"));
    }
    let mut planned = Vec::with_capacity(targets.len());
    for t in targets {
        let same: Vec<RoadId> = cohorts
            .low
            .iter()
            .filter(|r| clusters.label_of(r) == Some(t.cluster))
            .cloned()
            .collect();
        let same_cluster = !same.is_empty();
        let pool = if same_cluster { same } else { cohorts.low.clone() };
        let choice = find_reference(&t.road, &pool, d, panel, config.alpha, config.max_lag)?;
        warnings.extend(choice.warning);
        planned.push(PlannedTarget {
            target: t,
            reference: choice.best,
            same_cluster,
        });
    }
    Ok(EnforcementPlan {
        config: config.clone(),
        targets: planned,
        warnings,
    })
}

/// Enforced rows for `target` built from `reference`'s natural rows in `bundle`.
/// Returns the rows and whether the uniform fallback was needed anywhere.
pub fn build_enforced_attention(
    target: usize,
    reference: usize,
    bundle: &AttentionBundle,
    per_head: bool,
) -> (StRows, bool) {
    let natural = bundle.st_rows(reference);
    let heads = bundle.heads;
    // Reference (step -> own mass, step -> total mass) per head and output step.
    let profile = |h: usize, q: usize| {
        let mut own = [0.0; WINDOW];
        let mut all = [0.0; WINDOW];
        for e in &natural.rows[h][q] {
            all[e.step] += e.weight;
            if e.road == reference {
                own[e.step] += e.weight;
            }
        }
        (own, all)
    };
    let mut degenerate = false;
    let rows = (0..heads)
        .map(|h| {
            (0..WINDOW)
                .map(|q| {
                    let (own, all) = if per_head {
                        profile(h, q)
                    } else {
                        let mut own = [0.0; WINDOW];
                        let mut all = [0.0; WINDOW];
                        for hh in 0..heads {
                            let (o, a) = profile(hh, q);
                            for t in 0..WINDOW {
                                own[t] += o[t] / heads as f64;
                                all[t] += a[t] / heads as f64;
                            }
                        }
                        (own, all)
                    };
                    enforced_row(target, reference, &own, &all, &mut degenerate)
                })
                .collect()
        })
        .collect();
    if degenerate {
        tracing::warn!(target, reference, "reference self-profile is zero; using a uniform self-profile");
    }
    (StRows { rows }, degenerate)
}

fn enforced_row(target: usize, reference: usize, own: &[f64; WINDOW], all: &[f64; WINDOW], degenerate: &mut bool) -> Vec<StEntry> {
    let self_mass: f64 = own.iter().sum();
    let total: f64 = all.iter().sum();
    if self_mass <= 0.0 {
        *degenerate = true;
        return (0..WINDOW)
            .map(|step| StEntry {
                road: target,
                step,
                weight: 1.0 / WINDOW as f64,
            })
            .collect();
    }
    let residual = (total - self_mass).max(0.0);
    let mut entries: Vec<StEntry> = own
        .iter()
        .enumerate()
        .map(|(step, &w)| StEntry { road: target, step, weight: w })
        .collect();
    if residual > 0.0 && total > 0.0 {
        entries.extend(all.iter().enumerate().map(|(step, &m)| StEntry {
            road: reference,
            step,
            weight: residual * m / total,
        }));
    }
    let sum: f64 = entries.iter().map(|e| e.weight).sum();
    for e in &mut entries {
        e.weight /= sum;
    }
    entries
}

/// Before/after absolute-error histograms over shared bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedHistogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub before: Vec<usize>,
    pub after: Vec<usize>,
    /// `mean(after) - mean(before)`; negative means the distribution moved left.
    pub mean_shift: f64,
}

pub fn report_histogram(before: &[f64], after: &[f64], bins: usize) -> Result<PairedHistogram> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch {
            left: before.len(),
            right: after.len(),
        });
    }
    let bins = bins.max(1);
    let top = before.iter().chain(after).copied().fold(0.0, f64::max);
    let width = if top > 0.0 { top / bins as f64 } else { 1.0 };
    let count = |xs: &[f64]| {
        let mut c = vec![0usize; bins];
        for &x in xs {
            c[((x / width).floor() as usize).min(bins - 1)] += 1;
        }
        c
    };
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Ok(PairedHistogram {
        edges: (0..=bins).map(|i| i as f64 * width).collect(),
        before: count(before),
        after: count(after),
        mean_shift: mean(after) - mean(before),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonDelta {
    pub horizon: Horizon,
    pub mae_before: f64,
    pub mae_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub road: RoadId,
    pub reference: RoadId,
    pub horizons: Vec<HorizonDelta>,
}

impl TargetOutcome {
    pub fn at(&self, horizon: Horizon) -> Option<&HorizonDelta> {
        self.horizons.iter().find(|h| h.horizon == horizon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnforcementSummary {
    pub mean_mae_before: f64,
    pub mean_mae_after: f64,
    pub mean_delta: f64,
    pub fraction_improved: f64,
    /// Largest change of any non-target prediction (0 by construction).
    pub non_target_max_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnforcementReport {
    pub plan: EnforcementPlan,
    pub horizon: Horizon,
    pub windows: usize,
    pub targets: Vec<TargetOutcome>,
    pub histogram: PairedHistogram,
    pub summary: EnforcementSummary,
    pub degenerate_fallbacks: usize,
}

impl EnforcementReport {
    /// `road_id,horizon,mae_before,mae_after`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["road_id", "horizon", "mae_before", "mae_after"])?;
        for t in &self.targets {
            for h in &t.horizons {
                w.write_record([
                    t.road.as_str(),
                    &h.horizon.minutes().to_string(),
                    &h.mae_before.to_string(),
                    &h.mae_after.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Enforcement patch for a plan: maps a window's natural attention to the
/// targets' enforced rows.
pub fn enforcement_patch<'a>(
    model: &'a ModelState,
    plan: &'a EnforcementPlan,
    fallbacks: &'a std::sync::atomic::AtomicUsize,
) -> Result<impl Fn(usize, &AttentionBundle) -> Result<Vec<(usize, StRows)>> + Sync + 'a> {
    let pairs: Vec<(usize, usize)> = plan
        .targets
        .iter()
        .map(|p| {
            let idx = |r: &RoadId| model.network().index_of(r).ok_or_else(|| Error::UnknownRoad(r.to_string()));
            Ok((idx(&p.target.road)?, idx(&p.reference.road)?))
        })
        .collect::<Result<_>>()?;
    let per_head = plan.config.per_head;
    Ok(move |_w: usize, bundle: &AttentionBundle| {
        Ok(pairs
            .iter()
            .map(|&(t, r)| {
                let (rows, degenerate) = build_enforced_attention(t, r, bundle, per_head);
                if degenerate {
                    fallbacks.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                }
                (t, rows)
            })
            .collect())
    })
}

/// Re-run inference over `starts` with the plan's targets enforced.
///
/// `baseline` optionally patches attention for the "before" run as well; the
/// enforced run replaces the targets' rows, and a baseline patch is kept for
/// any other road it touches.
pub fn run_alternative_inference(
    model: &ModelState,
    plan: &EnforcementPlan,
    panel: &SpeedPanel,
    starts: &[usize],
    baseline: Option<&PatchFn<'_>>,
) -> Result<EnforcementReport> {
    let before = model.predict_patched(panel, starts, baseline)?;
    let fallbacks = std::sync::atomic::AtomicUsize::new(0);
    let after = if plan.targets.is_empty() {
        before.clone()
    } else {
        let enforce = enforcement_patch(model, plan, &fallbacks)?;
        let combined = |w: usize, bundle: &AttentionBundle| -> Result<Vec<(usize, StRows)>> {
            let mut rows = enforce(w, bundle)?;
            if let Some(base) = baseline {
                let enforced: BTreeSet<usize> = rows.iter().map(|(r, _)| *r).collect();
                rows.extend(base(w, bundle)?.into_iter().filter(|(r, _)| !enforced.contains(r)));
            }
            Ok(rows)
        };
        model.predict_patched(panel, starts, Some(&combined))?
    };
    report_from_predictions(plan, panel, &before, &after, fallbacks.into_inner())
}

fn report_from_predictions(
    plan: &EnforcementPlan,
    panel: &SpeedPanel,
    before: &PredictionPanel,
    after: &PredictionPanel,
    degenerate_fallbacks: usize,
) -> Result<EnforcementReport> {
    let horizon = plan.config.horizon;
    let eb = compute_errors(before, panel)?;
    let ea = compute_errors(after, panel)?;
    let target_set: BTreeSet<&RoadId> = plan.targets.iter().map(|p| &p.target.road).collect();

    let mut non_target_max_change: f64 = 0.0;
    for (r, id) in before.roads.iter().enumerate() {
        if target_set.contains(id) {
            continue;
        }
        for (wb, wa) in before.values.iter().zip(&after.values) {
            for (b, a) in wb[r].iter().zip(&wa[r]) {
                non_target_max_change = non_target_max_change.max((b - a).abs());
            }
        }
    }

    let mut targets = Vec::with_capacity(plan.targets.len());
    let (mut pooled_b, mut pooled_a) = (Vec::new(), Vec::new());
    for p in &plan.targets {
        let road = &p.target.road;
        let horizons = HORIZONS
            .iter()
            .filter_map(|&h| {
                Some(HorizonDelta {
                    horizon: h,
                    mae_before: eb.mae(road, h)?,
                    mae_after: ea.mae(road, h)?,
                })
            })
            .collect();
        pooled_b.extend(absolute_errors(before, panel, road, horizon)?);
        pooled_a.extend(absolute_errors(after, panel, road, horizon)?);
        targets.push(TargetOutcome {
            road: road.clone(),
            reference: p.reference.road.clone(),
            horizons,
        });
    }
    let at: Vec<&HorizonDelta> = targets.iter().filter_map(|t| t.at(horizon)).collect();
    let n = at.len().max(1) as f64;
    let mean_mae_before = at.iter().map(|d| d.mae_before).sum::<f64>() / n;
    let mean_mae_after = at.iter().map(|d| d.mae_after).sum::<f64>() / n;
    let improved = at.iter().filter(|d| d.mae_after < d.mae_before).count();
    Ok(EnforcementReport {
        plan: plan.clone(),
        horizon,
        windows: before.num_windows(),
        histogram: report_histogram(&pooled_b, &pooled_a, 20)?,
        summary: EnforcementSummary {
            mean_mae_before,
            mean_mae_after,
            mean_delta: mean_mae_after - mean_mae_before,
            fraction_improved: if at.is_empty() { 0.0 } else { improved as f64 / at.len() as f64 },
            non_target_max_change,
        },
        targets,
        degenerate_fallbacks,
    })
}

/// Patch that points each `(target, decoy)` target's attention entirely at the
/// decoy road, spread evenly over the 12 input steps. Used to build the
/// distracted-attention fixture.
pub fn distraction_patch(pairs: Vec<(usize, usize)>, heads: usize) -> impl Fn(usize, &AttentionBundle) -> Result<Vec<(usize, StRows)>> + Sync {
    move |_w, _bundle| {
        Ok(pairs
            .iter()
            .map(|&(t, decoy)| {
                let row: Vec<StEntry> = (0..WINDOW)
                    .map(|step| StEntry {
                        road: decoy,
                        step,
                        weight: 1.0 / WINDOW as f64,
                    })
                    .collect();
                (t, StRows { rows: vec![vec![row; WINDOW]; heads] })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_conserves_counts_and_shift() {
        let before = [1.0, 2.0, 3.0, 4.0];
        let after = [0.0, 1.0, 2.0, 3.0];
        let h = report_histogram(&before, &after, 4).unwrap();
        assert_eq!(h.before.iter().sum::<usize>(), h.after.iter().sum::<usize>());
        assert_eq!(h.mean_shift, -1.0);
        let same = report_histogram(&before, &before, 4).unwrap();
        assert_eq!(same.mean_shift, 0.0);
        assert_eq!(same.before, same.after);
        assert_eq!(h.edges.len(), 5);
    }

    #[test]
    fn enforced_row_transfers_self_mass() {
        let mut own = [0.0; WINDOW];
        let mut all = [0.0; WINDOW];
        own[11] = 0.3;
        own[10] = 0.1;
        all[11] = 0.5;
        all[10] = 0.3;
        all[0] = 0.2;
        let mut deg = false;
        let row = enforced_row(0, 1, &own, &all, &mut deg);
        assert!(!deg);
        let sum: f64 = row.iter().map(|e| e.weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let self_mass: f64 = row.iter().filter(|e| e.road == 0).map(|e| e.weight).sum();
        assert!((self_mass - 0.4).abs() < 1e-12);
        let r0: f64 = row.iter().filter(|e| e.road == 1 && e.step == 0).map(|e| e.weight).sum();
        assert!((r0 - 0.6 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn fully_self_referential_reference_copies_profile() {
        let mut own = [0.0; WINDOW];
        own[5] = 0.25;
        own[11] = 0.75;
        let mut deg = false;
        let row = enforced_row(2, 7, &own, &own, &mut deg);
        assert!(row.iter().all(|e| e.road == 2));
        assert_eq!(row[11].weight, 0.75);
    }

    #[test]
    fn zero_self_profile_falls_back_to_uniform() {
        let own = [0.0; WINDOW];
        let all = [1.0 / WINDOW as f64; WINDOW];
        let mut deg = false;
        let row = enforced_row(0, 1, &own, &all, &mut deg);
        assert!(deg);
        assert!(row.iter().all(|e| e.road == 0 && (e.weight - 1.0 / 12.0).abs() < 1e-15));
    }
}
