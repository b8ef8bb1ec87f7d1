use attnlens_core::data::{Edge, RoadId, RoadNetwork, SpeedPanel, SpeedUnit, WINDOW};
use attnlens_core::model::{
    extract_st_attention, load_checkpoint, save_checkpoint, train, AttentionOverrides, Horizon,
    ModelConfig, ModelState, Normalization, StEntry, StMatrix, StRows, StSource,
};
use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(n: usize) -> Vec<RoadId> {
    (0..n).map(|i| RoadId::new(format!("r{i}"))).collect()
}

fn edge(a: usize, b: usize) -> Edge {
    Edge {
        from: RoadId::new(format!("r{a}")),
        to: RoadId::new(format!("r{b}")),
        weight: 1.0,
    }
}

/// r0 -> r1 -> r2, r0 -> r2, r3 isolated.
fn network() -> RoadNetwork {
    RoadNetwork::new(ids(4), vec![edge(0, 1), edge(1, 2), edge(0, 2)]).unwrap()
}

fn random_panel(roads: usize, len: usize, seed: u64) -> SpeedPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = (0..roads)
        .map(|r| (0..len).map(|_| 40.0 + 5.0 * r as f64 + rng.random_range(-10.0..10.0)).collect())
        .collect();
    let start = Utc.with_ymd_and_hms(2024, 3, 4, 6, 0, 0).unwrap();
    SpeedPanel::from_complete(start, SpeedUnit::Kmh, ids(roads), series).unwrap()
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        width: 16,
        ffn_width: 16,
        seed,
        ..ModelConfig::default()
    }
}

fn model(seed: u64, panel: &SpeedPanel) -> ModelState {
    ModelState::init(network(), Normalization::fit(panel), small_config(seed)).unwrap()
}

#[test]
fn attention_rows_are_distributions() {
    for seed in 0..10 {
        let panel = random_panel(4, 30, seed);
        let m = model(seed, &panel);
        let b = m.attention(&panel, 3).unwrap();
        for h in 0..b.heads {
            for t in 0..WINDOW {
                for r in 0..4 {
                    let row = &b.sa[h][t][r];
                    assert_eq!(row.len(), b.neighbors[r].len() + 1);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                    assert!(row.iter().all(|w| (0.0..=1.0).contains(w)));
                }
            }
            for r in 0..4 {
                for q in 0..WINDOW {
                    for table in [&b.ta, &b.ta_encoder, &b.ta_decoder] {
                        let row = &table[h][r][q];
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }
}

#[test]
fn isolated_road_puts_all_spatial_mass_on_sentinel() {
    let panel = random_panel(4, 30, 1);
    let b = model(1, &panel).attention(&panel, 0).unwrap();
    for h in 0..b.heads {
        for t in 0..WINDOW {
            assert_eq!(b.sa[h][t][3], vec![1.0]);
        }
    }
    let st = StMatrix::from_bundle(&b, &"r3".into(), Horizon::default(), StSource::Decoder).unwrap();
    assert!((st.self_reference - 1.0).abs() < 1e-12);
}

#[test]
fn decoder_self_attention_is_causal() {
    let panel = random_panel(4, 30, 2);
    let b = model(2, &panel).attention(&panel, 0).unwrap();
    for h in 0..b.heads {
        for r in 0..4 {
            assert_eq!(b.ta_decoder[h][r][0][0], 1.0);
            for q in 0..WINDOW {
                assert!(b.ta_decoder[h][r][q][q + 1..].iter().all(|&w| w == 0.0));
            }
        }
    }
}

#[test]
fn st_cells_are_exact_products() {
    let panel = random_panel(4, 30, 3);
    let m = model(3, &panel);
    let horizon = Horizon::new(30).unwrap();
    let st = extract_st_attention(&m, &panel, 2, &"r2".into(), horizon, StSource::Decoder).unwrap();
    let b = m.attention(&panel, 2).unwrap();
    assert_eq!(st.references, vec![RoadId::from("r0"), RoadId::from("r1"), RoadId::from("r2")]);
    for h in 0..b.heads {
        for (j, row) in st.per_head[h].iter().enumerate() {
            for (tau, &cell) in row.iter().enumerate() {
                let expect = b.ta[h][2][horizon.step_index()][tau] * b.sa[h][tau][2][j];
                assert_eq!(cell.to_bits(), expect.to_bits());
            }
        }
        assert!((st.per_head[h].iter().flatten().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!((0.0..=1.0).contains(&st.self_reference));
    assert!(extract_st_attention(&m, &panel, 2, &"nope".into(), horizon, StSource::Decoder).is_err());
}

#[test]
fn natural_rows_as_overrides_reproduce_predictions() {
    let panel = random_panel(4, 30, 4);
    let m = model(4, &panel);
    let natural = m.predict(&panel, &[5]).unwrap().values.remove(0);
    let b = m.attention(&panel, 5).unwrap();
    let mut ov = AttentionOverrides::new();
    for r in 0..4 {
        ov.insert(0, r, b.st_rows(r));
    }
    let replayed = m.predict_with_overrides(&panel, 5, &ov).unwrap();
    for r in 0..4 {
        for q in 0..WINDOW {
            assert!((natural[r][q] - replayed[r][q]).abs() < 1e-9, "road {r} step {q}");
        }
    }
}

#[test]
fn overrides_leave_other_roads_bitwise_unchanged() {
    let panel = random_panel(4, 30, 5);
    let m = model(5, &panel);
    let natural = m.predict(&panel, &[0]).unwrap().values.remove(0);
    // Road 2 attends only to road 3's most recent step.
    let rows = vec![vec![vec![StEntry { road: 3, step: 11, weight: 1.0 }]; WINDOW]; m.heads()];
    let mut ov = AttentionOverrides::new();
    ov.insert(0, 2, StRows { rows });
    let patched = m.predict_with_overrides(&panel, 0, &ov).unwrap();
    for r in [0, 1, 3] {
        for q in 0..WINDOW {
            assert_eq!(natural[r][q].to_bits(), patched[r][q].to_bits());
        }
    }
    assert!(natural[2].iter().zip(&patched[2]).any(|(a, b)| a != b));

    let bad = vec![vec![vec![]; WINDOW]; m.heads() + 1];
    let mut ov = AttentionOverrides::new();
    ov.insert(0, 1, StRows { rows: bad });
    assert!(m.predict_with_overrides(&panel, 0, &ov).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let roads = 3;
    let net = RoadNetwork::new(ids(roads), vec![edge(0, 1), edge(1, 2)]).unwrap();
    let panel = random_panel(roads, 26, 9);
    let config = ModelConfig {
        width: 8,
        ffn_width: 8,
        heads: 2,
        seed: 9,
        ..ModelConfig::default()
    };
    let m = ModelState::init(net, Normalization::fit(&panel), config).unwrap();
    let starts = [0, 2];
    let (_, grads) = m.loss_and_gradients(&panel, &starts).unwrap();
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for idx in 0..g.len().min(6) {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut plus = m.params().to_vec();
            plus[pi][[r, c]] += eps;
            let mut minus = m.params().to_vec();
            minus[pi][[r, c]] -= eps;
            let mut mp = m.clone();
            mp.set_params(plus).unwrap();
            let mut mm = m.clone();
            mm.set_params(minus).unwrap();
            let fd = (mp.loss(&panel, &starts).unwrap() - mm.loss(&panel, &starts).unwrap()) / (2.0 * eps);
            let an = g[[r, c]];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn road_relabeling_permutes_outputs() {
    let panel = random_panel(4, 30, 6);
    let m = model(6, &panel);
    let order = [2, 0, 3, 1];
    let norm = m.normalization();
    let permuted_norm = Normalization {
        mean: order.iter().map(|&i| norm.mean[i]).collect(),
        std: order.iter().map(|&i| norm.std[i]).collect(),
    };
    let pm = ModelState::init(network().reordered(&order).unwrap(), permuted_norm, small_config(6)).unwrap();
    let a = m.predict(&panel, &[1]).unwrap();
    let b = pm.predict(&panel, &[1]).unwrap();
    for (new, &old) in order.iter().enumerate() {
        for q in 0..WINDOW {
            assert!((a.values[0][old][q] - b.values[0][new][q]).abs() < 1e-10);
        }
    }
}

#[test]
fn inference_is_pure() {
    let panel = random_panel(4, 40, 7);
    let m = model(7, &panel);
    let a = m.predict(&panel, &[0, 3, 9]).unwrap();
    let b = m.predict(&panel, &[0, 3, 9]).unwrap();
    assert_eq!(a, b);
    let single = m.predict(&panel, &[3]).unwrap();
    assert_eq!(single.values[0], a.values[1]);
    assert_eq!(a.values[0].len(), 4);
    assert_eq!(a.values[0][0].len(), WINDOW);
}

#[test]
fn prediction_rejects_unknown_roads() {
    let panel = random_panel(5, 30, 8);
    let m = model(8, &random_panel(4, 30, 8));
    assert!(m.predict(&panel, &[0]).is_err());
}

#[test]
fn zero_epochs_returns_untrained_state() {
    let panel = random_panel(4, 200, 10);
    let (tr, va) = (panel.slice(0..150), panel.slice(150..200));
    let config = ModelConfig {
        epochs: 0,
        ..small_config(1)
    };
    let m = train(&tr, &va, &network(), &config).unwrap();
    assert!(!m.is_trained());
    assert!(m.history().is_empty());
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let panel = random_panel(4, 200, 11);
    let (tr, va) = (panel.slice(0..150), panel.slice(150..200));
    let config = ModelConfig {
        epochs: 2,
        windows_per_epoch: Some(32),
        ..small_config(3)
    };
    let a = train(&tr, &va, &network(), &config).unwrap();
    let b = train(&tr, &va, &network(), &config).unwrap();
    assert!(a.is_trained());
    assert_eq!(a.history(), b.history());
    assert_eq!(a.params(), b.params());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&a, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params(), a.params());
    assert_eq!(a.predict(&va, &[0]).unwrap(), back.predict(&va, &[0]).unwrap());

    std::fs::write(&path, b"{\"format\":\"other\"}").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
