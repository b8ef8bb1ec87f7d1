use std::path::Path;
use std::sync::Arc;

use attnlens_core::data::synth::{synth_generate, SynthConfig};
use attnlens_core::data::{chronological_split, SplitSpec};
use attnlens_core::model::{save_checkpoint, train, ModelConfig};
use attnlens_core::snapshot::{build_snapshot, Snapshot, SnapshotConfig, SnapshotInputs};
use attnlens_server::{router, AppState};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

fn snapshot(dir: &Path) -> Snapshot {
    let (panel, network, _) = synth_generate(&SynthConfig::two_cluster(1.0), 11).unwrap();
    let (tr, va, _) = chronological_split(&panel, &SplitSpec::default()).unwrap();
    let config = ModelConfig {
        width: 8,
        ffn_width: 8,
        heads: 2,
        epochs: 1,
        windows_per_epoch: Some(32),
        seed: 11,
        ..ModelConfig::default()
    };
    let model = train(&tr, &va, &network, &config).unwrap();
    let checkpoint = dir.join("model.json");
    save_checkpoint(&model, &checkpoint).unwrap();
    let inputs = SnapshotInputs {
        dataset: "two-cluster".into(),
        panel,
        checkpoint,
    };
    let config = SnapshotConfig {
        head_cluster_windows: 16,
        max_lag: 6,
        ..SnapshotConfig::default()
    };
    build_snapshot(&inputs, &config, dir.join("snap")).unwrap();
    Snapshot::load(dir.join("snap")).unwrap()
}

struct Api {
    app: Router,
    _dir: tempfile::TempDir,
}

fn api() -> Api {
    let dir = tempfile::tempdir().unwrap();
    let snap = snapshot(dir.path());
    Api {
        app: router(AppState::new(snap, 2)),
        _dir: dir,
    }
}

impl Api {
    async fn raw(&self, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        let req = req.body(Body::from(body.unwrap_or("").to_owned())).unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        let (status, bytes) = self.raw("GET", uri, None).await;
        (status, serde_json::from_slice(&bytes).unwrap())
    }
}

fn analysed_time(meta: &Value, offset_steps: i64) -> String {
    let start: chrono::DateTime<chrono::Utc> = meta["analysed_range"]["start"].as_str().unwrap().parse().unwrap();
    (start + chrono::Duration::minutes(5 * offset_steps)).to_rfc3339()
}

fn enc(s: &str) -> String {
    s.replace('+', "%2B").replace(':', "%3A")
}

#[tokio::test]
async fn get_endpoints_are_byte_stable() {
    let api = api();
    let (_, meta) = api.get("/snapshot").await;
    let t = enc(&analysed_time(&meta, 30));
    let uris = [
        "/snapshot".to_string(),
        "/roads".into(),
        "/roads?horizon=30&mae_threshold=4.2".into(),
        "/roads/r003/trend".into(),
        format!("/roads/r003/series?cursor={t}"),
        format!("/roads/r003/attention?t={t}"),
        format!("/roads/r003/attention?t={t}&head=1&threshold=0"),
        "/roads/r003/causality".into(),
        "/clusters".into(),
        "/headclusters?scale=global".into(),
        "/headclusters?scale=local".into(),
    ];
    for uri in &uris {
        let (s1, b1) = api.raw("GET", uri, None).await;
        let (s2, b2) = api.raw("GET", uri, None).await;
        assert_eq!(s1, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&b1));
        assert_eq!(s2, StatusCode::OK);
        assert_eq!(b1, b2, "{uri} not byte-stable");
        let v: Value = serde_json::from_slice(&b1).unwrap();
        assert_eq!(v["schema_version"], 1);
    }
}

#[tokio::test]
async fn roads_echo_snapshot() {
    let api = api();
    let (status, v) = api.get("/roads?mae_threshold=0").await;
    assert_eq!(status, StatusCode::OK);
    let roads = v["roads"].as_array().unwrap();
    assert_eq!(roads.len(), 10);
    for r in roads {
        assert!(r["cluster"].is_u64());
        assert!(r["mae"]["15"].is_f64());
        assert!(r["speed_std"].is_f64());
        assert_eq!(r["above_threshold"], true);
        let counts: u64 = r["histogram"]["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
        assert!(counts > 0);
    }
    let (_, v) = api.get("/roads?mae_threshold=1000000").await;
    assert!(v["roads"].as_array().unwrap().iter().all(|r| r["above_threshold"] == false));
}

#[tokio::test]
async fn local_head_cluster_rows_sum_to_one() {
    let api = api();
    let (status, v) = api.get("/headclusters?scale=local").await;
    assert_eq!(status, StatusCode::OK);
    let matrices = v["matrices"].as_array().unwrap();
    assert_eq!(matrices.len(), 4);
    for m in matrices {
        let empty: Vec<u64> = m["empty_rows"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
        for (i, row) in m["cells"].as_array().unwrap().iter().enumerate() {
            if empty.contains(&(i as u64)) {
                continue;
            }
            let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}

#[tokio::test]
async fn attention_and_series_views() {
    let api = api();
    let (_, meta) = api.get("/snapshot").await;
    let t = enc(&analysed_time(&meta, 40));
    let (status, v) = api.get(&format!("/roads/r002/attention?t={t}&threshold=0.1")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["st"]["matrix"]["mean"][0].as_array().unwrap().len(), 12);
    for a in v["arrows"]["arrows"].as_array().unwrap() {
        assert!(a["intensity"].as_f64().unwrap() >= 0.1);
    }
    let (status, v) = api.get(&format!("/roads/r002/series?cursor={t}")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["cursor"]["label"].as_str().unwrap().starts_with("AE: "));
    let (status, v) = api.get("/roads/r002/causality").await;
    assert_eq!(status, StatusCode::OK);
    for (r, label) in v["results"].as_array().unwrap().iter().zip(v["labels"].as_array().unwrap()) {
        assert!(r["p_value"].as_f64().unwrap() < 0.05);
        assert!(label.as_str().unwrap().contains(": F["));
    }
}

#[tokio::test]
async fn errors_are_machine_readable() {
    let api = api();
    let (_, meta) = api.get("/snapshot").await;
    let t = enc(&analysed_time(&meta, 40));
    let early = enc(&analysed_time(&meta, 2));

    let cases = [
        ("/roads/nope/trend".to_string(), StatusCode::NOT_FOUND, "unknown_road"),
        (format!("/roads/nope/attention?t={t}"), StatusCode::NOT_FOUND, "unknown_road"),
        ("/roads/r001/attention?t=2001-01-01T00%3A00%3A00Z".into(), StatusCode::NOT_FOUND, "unknown_timestamp"),
        (format!("/roads/r001/attention?t={early}"), StatusCode::NOT_FOUND, "no_history"),
        ("/roads/r001/attention?t=yesterday".into(), StatusCode::BAD_REQUEST, "bad_request"),
        ("/roads/r001/attention".into(), StatusCode::BAD_REQUEST, "bad_request"),
        (format!("/roads/r001/attention?t={t}&head=9"), StatusCode::BAD_REQUEST, "bad_request"),
        ("/roads?horizon=7".into(), StatusCode::BAD_REQUEST, "bad_request"),
        ("/headclusters?scale=huge".into(), StatusCode::BAD_REQUEST, "bad_request"),
        ("/enforce/999".into(), StatusCode::NOT_FOUND, "unknown_job"),
        ("/nothing".into(), StatusCode::NOT_FOUND, "no_route"),
    ];
    for (uri, status, code) in cases {
        let (s, v) = api.get(&uri).await;
        assert_eq!(s, status, "{uri}");
        assert_eq!(v["error"]["code"], code, "{uri}");
        assert!(v["error"]["message"].is_string());
    }
}

#[tokio::test]
async fn enforcement_jobs() {
    let api = api();
    let (s, v) = api.raw("POST", "/enforce", Some(r#"{"clusters": []}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&v).unwrap();
    assert_eq!(v["error"]["code"], "bad_request");
    let (s, _) = api.raw("POST", "/enforce", Some(r#"{"clusters": [0], "alpha": 2}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = api.raw("POST", "/enforce", Some(r#"{"clusters": [7]}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = api.raw("POST", "/enforce", Some("not json")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, body) = api
        .raw("POST", "/enforce", Some(r#"{"clusters": [0, 1], "k": 2, "alpha": 0.5, "stride": 8}"#))
        .await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = serde_json::from_slice::<Value>(&body).unwrap()["job"].as_u64().unwrap();
    let report = loop {
        let (s, v) = api.get(&format!("/enforce/{job}")).await;
        assert_eq!(s, StatusCode::OK);
        match v["status"].as_str().unwrap() {
            "done" => break v["report"].clone(),
            "failed" => panic!("job failed: {}", v["error"]),
            _ => tokio::time::sleep(std::time::Duration::from_millis(50)).await,
        }
    };
    assert_eq!(report["summary"]["non_target_max_change"], 0.0);
    let count = |k: &str| -> u64 { report["histogram"][k].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum() };
    assert_eq!(count("before"), count("after"));

    // Jobs leave the snapshot untouched.
    let (_, after) = api.raw("GET", "/roads", None).await;
    let (_, again) = api.raw("GET", "/roads", None).await;
    assert_eq!(after, again);
}

#[tokio::test]
async fn shared_state_serves_concurrent_readers() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(snapshot(dir.path()), 1);
    let app = router(Arc::clone(&state));
    let t = enc(&state.snapshot().test.timestamp(50).to_rfc3339());
    let uri = format!("/roads/r004/attention?t={t}");
    let mut handles = Vec::new();
    for _ in 0..8 {
        let app = app.clone();
        let uri = uri.clone();
        handles.push(tokio::spawn(async move {
            let resp = app.oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
            resp.into_body().collect().await.unwrap().to_bytes()
        }));
    }
    let mut bodies = Vec::new();
    for h in handles {
        bodies.push(h.await.unwrap());
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}
