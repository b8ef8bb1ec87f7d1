use attnlens_core::data::{RoadId, SpeedPanel, SpeedUnit, SLOTS_PER_DAY};
use attnlens_core::metrics::{
    cohorts_from_values, compute_errors, mae_filter, quartile_cohorts, speed_histogram, top_error_fraction,
    windowed_ae, ErrorStats, HistoricalAverage,
};
use attnlens_core::model::{window_starts, Horizon, PredictionPanel, HORIZONS};
use chrono::{TimeZone, Utc};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<RoadId> {
    (0..n).map(|i| RoadId::new(format!("{}", i + 1))).collect()
}

fn start() -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 4, 0, 0, 0).unwrap()
}

/// Road `r` is forecast with a constant offset of `r + 1` at every step.
fn offset_predictions(panel: &SpeedPanel) -> PredictionPanel {
    let starts = window_starts(panel.len(), true);
    let values = starts
        .iter()
        .map(|&s| {
            (0..panel.num_roads())
                .map(|r| (0..12).map(|q| panel.value(r, s + 12 + q) + (r + 1) as f64).collect())
                .collect()
        })
        .collect();
    PredictionPanel {
        roads: panel.roads().to_vec(),
        panel_start: panel.start(),
        window_starts: starts,
        values,
    }
}

#[test]
fn quartile_fixture() {
    let values: Vec<(RoadId, f64)> = ids(8).into_iter().zip((1..=8).map(f64::from)).collect();
    let c = cohorts_from_values(&values, Horizon::default()).unwrap();
    assert_eq!(c.q1, 2.75);
    assert_eq!(c.q3, 6.25);
    assert_eq!(c.low, vec![RoadId::new("1"), RoadId::new("2")]);
    assert_eq!(c.high, vec![RoadId::new("7"), RoadId::new("8")]);
}

#[test]
fn cohorts_need_four_roads() {
    let values: Vec<(RoadId, f64)> = ids(3).into_iter().zip([1.0, 2.0, 3.0]).collect();
    assert!(cohorts_from_values(&values, Horizon::default()).is_err());
}

#[test]
fn errors_of_constant_offsets() {
    let series = (0..8).map(|r| (0..60).map(|t| 30.0 + r as f64 + (t % 7) as f64).collect()).collect();
    let panel = SpeedPanel::from_complete(start(), SpeedUnit::Mph, ids(8), series).unwrap();
    let table = compute_errors(&offset_predictions(&panel), &panel).unwrap();
    for h in HORIZONS {
        for (r, id) in ids(8).iter().enumerate() {
            let s = table.stats(id, h).unwrap();
            assert!((s.mae - (r + 1) as f64).abs() < 1e-12);
            assert!((s.rmse - (r + 1) as f64).abs() < 1e-12);
        }
    }
    let c = quartile_cohorts(&table, Horizon::default()).unwrap();
    assert_eq!((c.q1, c.q3), (2.75, 6.25));
    assert_eq!(mae_filter(&table, Horizon::default(), 4.2).len(), 4);
    assert_eq!(top_error_fraction(&table, Horizon::default(), 0.1), vec![RoadId::new("8")]);

    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("road_id,horizon,mae,rmse,mape\n"));
    assert_eq!(text.lines().count(), 1 + 8 * 4);
}

#[test]
fn imputed_actuals_are_not_scored() {
    let series: Vec<Vec<f64>> = vec![(0..40).map(|t| 50.0 + t as f64).collect(); 4];
    let mut mask = vec![vec![false; 40]; 4];
    // Every target of road 0 imputed: no stats at all.
    mask[0] = vec![true; 40];
    let panel = SpeedPanel::new(start(), SpeedUnit::Kmh, ids(4), series, mask).unwrap();
    let table = compute_errors(&offset_predictions(&panel), &panel).unwrap();
    assert!(table.stats(&RoadId::new("1"), Horizon::default()).is_none());
    assert_eq!(table.mae(&RoadId::new("2"), Horizon::default()), Some(2.0));
}

#[test]
fn mape_skips_zero_actuals() {
    let s = ErrorStats::from_pairs([(1.0, 0.0), (11.0, 10.0)]).unwrap();
    assert_eq!(s.mape, Some(10.0));
    let s = ErrorStats::from_pairs([(1.0, 0.0)]).unwrap();
    assert_eq!(s.mape, None);
}

#[test]
fn historical_average_recovers_periodic_panel() {
    let len = 14 * SLOTS_PER_DAY;
    let series = (0..2)
        .map(|r| (0..len).map(|t| 40.0 + r as f64 + ((t % SLOTS_PER_DAY) as f64 / 20.0).sin()).collect())
        .collect();
    let panel = SpeedPanel::from_complete(start(), SpeedUnit::Kmh, ids(2), series).unwrap();
    let train = panel.slice(0..7 * SLOTS_PER_DAY);
    let test = panel.slice(7 * SLOTS_PER_DAY..len);
    let starts: Vec<usize> = window_starts(test.len(), true).into_iter().step_by(50).collect();
    let pred = HistoricalAverage::fit(&train).predict(&test, &starts).unwrap();
    let table = compute_errors(&pred, &test).unwrap();
    for id in ids(2) {
        assert!(table.mae(&id, Horizon::default()).unwrap() < 1e-9);
    }
}

#[test]
fn windowed_readout_format() {
    let actual: Vec<f64> = (0..20).map(|t| t as f64).collect();
    let predicted: Vec<f64> = actual.iter().map(|a| a + 1.5).collect();
    let r = windowed_ae(&predicted, &actual, 15).unwrap();
    assert_eq!(r.ae, 1.5);
    assert!(r.to_string().starts_with("AE: 1.50 STD:"));
    assert!(windowed_ae(&predicted, &actual, 10).is_err());
}

#[test]
fn histogram_counts_every_reading() {
    let panel = SpeedPanel::from_complete(start(), SpeedUnit::Mph, ids(1), vec![vec![0.0, 4.9, 5.0, 12.0, 64.9]]).unwrap();
    let h = speed_histogram(&panel, &RoadId::new("1"), 5.0).unwrap();
    assert_eq!(h.counts.iter().sum::<usize>(), 5);
    assert_eq!(h.counts[0], 2);
    assert_eq!(*h.heights.iter().max_by(|a, b| a.total_cmp(b)).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn mae_bounded_by_rmse(pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..50)) {
        let s = ErrorStats::from_pairs(pairs.iter().copied()).unwrap();
        prop_assert!(s.mae <= s.rmse + 1e-12);
        prop_assert_eq!(s.count, pairs.len());
    }

    #[test]
    fn cohorts_are_disjoint_and_strict(maes in prop::collection::vec(0.0f64..20.0, 4..40)) {
        let values: Vec<(RoadId, f64)> = ids(maes.len()).into_iter().zip(maes.iter().copied()).collect();
        let c = cohorts_from_values(&values, Horizon::default()).unwrap();
        prop_assert!(c.q1 <= c.q3);
        for (r, v) in &values {
            prop_assert_eq!(c.is_low(r), *v < c.q1);
            prop_assert_eq!(c.is_high(r), *v > c.q3);
        }
    }
}
