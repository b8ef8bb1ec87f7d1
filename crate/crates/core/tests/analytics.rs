use attnlens_core::attention::{
    attn_arrows, head_cluster_matrices, head_cluster_raw, sample_windows, st_view_at, HeadClusterMatrices, Scale,
};
use attnlens_core::data::synth::{synth_generate, SynthConfig};
use attnlens_core::data::{daily_trend, RoadId, RoadNetwork, SpeedPanel, SpeedUnit, WINDOW};
use attnlens_core::dependency::{dtw_matrix, spectral_cluster, ClusterAssignment, DistanceMatrix};
use attnlens_core::enforcement::{
    build_enforced_attention, distraction_patch, find_reference, plan_enforcement, run_alternative_inference,
    select_targets, EnforcementConfig,
};
use attnlens_core::metrics::{compute_errors, quartile_cohorts};
use attnlens_core::model::{window_starts, Horizon, ModelConfig, ModelState, Normalization, StSource};
use chrono::{TimeZone, Utc};

struct Fixture {
    panel: SpeedPanel,
    network: RoadNetwork,
    model: ModelState,
}

fn fixture(seed: u64) -> Fixture {
    let mut config = SynthConfig::two_cluster(1.0);
    config.days = 2;
    let (panel, network, _) = synth_generate(&config, seed).unwrap();
    let model_config = ModelConfig {
        width: 8,
        ffn_width: 8,
        heads: 2,
        seed,
        ..ModelConfig::default()
    };
    let model = ModelState::init(network.clone(), Normalization::fit(&panel), model_config).unwrap();
    Fixture { panel, network, model }
}

fn clusters_of(panel: &SpeedPanel) -> (DistanceMatrix, ClusterAssignment) {
    let ids = panel.roads().to_vec();
    let trends: Vec<_> = ids.iter().map(|r| daily_trend(panel, r).unwrap()).collect();
    let d = dtw_matrix(&ids, &trends, 4).unwrap();
    let c = spectral_cluster(&d, 2, 0).unwrap();
    (d, c)
}

#[test]
fn arrows_respect_threshold_and_mass() {
    let f = fixture(1);
    let road = f.network.roads()[2].clone();
    let view = st_view_at(&f.model, &f.panel, &road, 40, Horizon::default(), StSource::Decoder).unwrap();
    assert_eq!(view.matrix.mean.len(), view.matrix.references.len());
    assert!(view.matrix.mean.iter().all(|row| row.len() == WINDOW));
    assert!((view.matrix.total_mass(None) - 1.0).abs() < 1e-9);
    let all = attn_arrows(&view.matrix, None, 0.0);
    let arrowed: f64 = all.arrows.iter().map(|a| a.intensity).sum();
    assert!((arrowed + all.self_reference - 1.0).abs() < 1e-9);
    assert!(all.arrows.iter().all(|a| a.reference != road));
    let filtered = attn_arrows(&view.matrix, None, 0.1);
    assert!(filtered.arrows.iter().all(|a| a.intensity >= 0.1));
    let kept: f64 = filtered.arrows.iter().map(|a| a.intensity).sum();
    assert!((kept + filtered.dropped_mass - arrowed).abs() < 1e-9);
    assert!(st_view_at(&f.model, &f.panel, &road, 5, Horizon::default(), StSource::Decoder).is_err());
    assert!(st_view_at(&f.model, &f.panel, &RoadId::new("nope"), 40, Horizon::default(), StSource::Decoder).is_err());
}

#[test]
fn head_cluster_scales() {
    let f = fixture(2);
    let (_, clusters) = clusters_of(&f.panel);
    let starts = window_starts(f.panel.len(), true);
    let pred = f.model.predict(&f.panel, &starts).unwrap();
    let table = compute_errors(&pred, &f.panel).unwrap();
    let cohorts = quartile_cohorts(&table, Horizon::default()).unwrap();
    let picked: Vec<usize> = sample_windows(starts.len(), 16, 3).into_iter().map(|i| starts[i]).collect();
    assert_eq!(picked.len(), 16);
    let bundles = f.model.attention_many(&f.panel, &picked).unwrap();

    let raw = head_cluster_raw(&bundles, &clusters, &cohorts, StSource::Decoder).unwrap();
    assert_eq!(raw.matrices.len(), 2 * f.model.heads());
    for m in &raw.matrices {
        for (c, row) in m.cells.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if m.empty_rows.contains(&c) {
                assert_eq!(sum, 0.0);
            } else {
                // Rows average whole ST matrices, each of mass 1.
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }
    let local = head_cluster_matrices(&bundles, &clusters, &cohorts, StSource::Decoder, Scale::Local).unwrap();
    for m in &local.matrices {
        for (c, row) in m.cells.iter().enumerate() {
            if !m.empty_rows.contains(&c) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
    let global = HeadClusterMatrices::rescaled(&raw, Scale::Global);
    let top = global
        .matrices
        .iter()
        .flat_map(|m| m.cells.iter().flatten())
        .fold(0.0f64, |a, &b| a.max(b));
    assert!((top - 1.0).abs() < 1e-12);
}

#[test]
fn enforced_rows_carry_reference_self_mass() {
    let f = fixture(3);
    let bundle = f.model.attention(&f.panel, 30).unwrap();
    let (target, reference) = (1, 7);
    let natural = bundle.st_rows(reference);
    let (rows, degenerate) = build_enforced_attention(target, reference, &bundle, true);
    assert!(!degenerate);
    for h in 0..bundle.heads {
        for q in 0..WINDOW {
            let row = &rows.rows[h][q];
            assert!((row.iter().map(|e| e.weight).sum::<f64>() - 1.0).abs() < 1e-9);
            let own: f64 = natural.rows[h][q].iter().filter(|e| e.road == reference).map(|e| e.weight).sum();
            let enforced_self: f64 = row.iter().filter(|e| e.road == target).map(|e| e.weight).sum();
            assert!((own - enforced_self).abs() < 1e-6);
            assert!(row.iter().all(|e| e.road == target || e.road == reference));
        }
    }
}

#[test]
fn enforcement_is_local() {
    let f = fixture(4);
    let (d, clusters) = clusters_of(&f.panel);
    let starts = window_starts(f.panel.len(), true);
    let table = compute_errors(&f.model.predict(&f.panel, &starts).unwrap(), &f.panel).unwrap();
    let cohorts = quartile_cohorts(&table, Horizon::default()).unwrap();
    let config = EnforcementConfig {
        clusters: vec![0, 1],
        k: 2,
        max_lag: 6,
        ..EnforcementConfig::default()
    };
    let plan = plan_enforcement(&config, &table, &cohorts, &clusters, &d, &f.panel).unwrap();
    assert!(!plan.targets.is_empty());
    for t in &plan.targets {
        assert!(cohorts.is_high(&t.target.road));
        assert!(cohorts.is_low(&t.reference.road));
    }
    let sub: Vec<usize> = starts.iter().copied().step_by(7).collect();
    let report = run_alternative_inference(&f.model, &plan, &f.panel, &sub, None).unwrap();
    assert_eq!(report.summary.non_target_max_change, 0.0);
    let h = &report.histogram;
    assert_eq!(h.before.iter().sum::<usize>(), h.after.iter().sum::<usize>());

    // The distracted fixture leaves non-targets alone as well.
    let pairs: Vec<(usize, usize)> = plan
        .targets
        .iter()
        .map(|t| (f.network.index_of(&t.target.road).unwrap(), 0))
        .filter(|&(t, _)| t != 0)
        .collect();
    let patch = distraction_patch(pairs, f.model.heads());
    let distracted = run_alternative_inference(&f.model, &plan, &f.panel, &sub, Some(&patch)).unwrap();
    assert_eq!(distracted.summary.non_target_max_change, 0.0);

    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("road_id,horizon,mae_before,mae_after\n"));
}

#[test]
fn target_ties_break_by_road_id() {
    let ids: Vec<RoadId> = ["10", "9", "11", "2"].iter().map(|s| RoadId::new(*s)).collect();
    let clusters = ClusterAssignment {
        k: 1,
        ids: ids.clone(),
        labels: vec![0; 4],
        degenerate: false,
        elbow: Vec::new(),
    };
    let maes: Vec<(RoadId, f64)> = ids.iter().map(|r| (r.clone(), 5.0)).collect();
    let t = select_targets(&maes, &ids, &clusters, &[0], 3).unwrap();
    let picked: Vec<&str> = t.iter().map(|t| t.road.as_str()).collect();
    assert_eq!(picked, ["2", "9", "10"]);
    assert!(select_targets(&maes, &ids, &clusters, &[], 3).is_err());
    assert!(select_targets(&maes, &ids, &clusters, &[4], 3).is_err());
}

#[test]
fn reference_falls_back_to_road_id_when_nothing_separates() {
    let ids: Vec<RoadId> = ["t", "b", "a", "c"].iter().map(|s| RoadId::new(*s)).collect();
    let d = DistanceMatrix::new(
        ids.clone(),
        (0..4).map(|i| (0..4).map(|j| if i == j { 0.0 } else { 2.0 }).collect()).collect(),
    )
    .unwrap();
    let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let series = vec![
        (0..200).map(|t| ((t * 7919) % 13) as f64).collect(),
        vec![1.0; 200],
        vec![2.0; 200],
        vec![3.0; 200],
    ];
    let panel = SpeedPanel::from_complete(start, SpeedUnit::Kmh, ids.clone(), series).unwrap();
    let choice = find_reference(&ids[0], &ids[1..], &d, &panel, 0.5, 4).unwrap();
    assert_eq!(choice.best.road.as_str(), "a");
    assert!(choice.warning.is_some());
}
