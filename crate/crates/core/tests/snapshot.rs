use std::path::Path;

use attnlens_core::data::synth::{synth_generate, SynthConfig};
use attnlens_core::data::{chronological_split, SplitSpec};
use attnlens_core::model::{save_checkpoint, train, ModelConfig};
use attnlens_core::snapshot::{build_snapshot, Snapshot, SnapshotConfig, SnapshotInputs, MANIFEST_FILE};
use attnlens_core::Error;

fn inputs(dir: &Path) -> SnapshotInputs {
    let (panel, network, _) = synth_generate(&SynthConfig::two_cluster(1.0), 5).unwrap();
    let (tr, va, _) = chronological_split(&panel, &SplitSpec::default()).unwrap();
    let config = ModelConfig {
        width: 8,
        ffn_width: 8,
        heads: 2,
        epochs: 1,
        windows_per_epoch: Some(32),
        seed: 5,
        ..ModelConfig::default()
    };
    let model = train(&tr, &va, &network, &config).unwrap();
    let checkpoint = dir.join("model.json");
    save_checkpoint(&model, &checkpoint).unwrap();
    SnapshotInputs {
        dataset: "two-cluster".into(),
        panel,
        checkpoint,
    }
}

fn config() -> SnapshotConfig {
    SnapshotConfig {
        head_cluster_windows: 16,
        ..SnapshotConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn rebuilds_are_byte_identical_and_load() {
    let tmp = tempfile::tempdir().unwrap();
    let inputs = inputs(tmp.path());
    let a = build_snapshot(&inputs, &config(), tmp.path().join("a")).unwrap();
    let b = build_snapshot(&inputs, &config(), tmp.path().join("b")).unwrap();
    assert_eq!(a.id, b.id);
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));

    let snap = Snapshot::load(tmp.path().join("a")).unwrap();
    assert_eq!(snap.id(), a.id);
    assert_eq!(snap.road_ids().len(), 10);
    assert_eq!(snap.clusters.ids.len(), 10);
    assert!(!snap.clusters.elbow.is_empty());
    assert_eq!(snap.errors.roads.len(), 10);
    assert!(snap.trends.iter().all(|t| t.len() == 288));

    // Publishing over an existing snapshot is refused.
    assert!(matches!(
        build_snapshot(&inputs, &config(), tmp.path().join("a")),
        Err(Error::Snapshot(_))
    ));
}

#[test]
fn missing_checkpoint_refused_without_partial_state() {
    let tmp = tempfile::tempdir().unwrap();
    let mut inputs = inputs(tmp.path());
    inputs.checkpoint = tmp.path().join("absent.json");
    let out = tmp.path().join("snap");
    assert!(matches!(build_snapshot(&inputs, &config(), &out), Err(Error::Snapshot(_))));
    assert!(!out.exists());
    let leftovers = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(".snapshot-"))
        .count();
    assert_eq!(leftovers, 0);
}

#[test]
fn tampered_artifacts_fail_to_load() {
    let tmp = tempfile::tempdir().unwrap();
    let inputs = inputs(tmp.path());
    let out = tmp.path().join("snap");
    build_snapshot(&inputs, &config(), &out).unwrap();
    let cohorts = out.join("cohorts.json");
    let mut bytes = std::fs::read(&cohorts).unwrap();
    bytes.push(b' ');
    std::fs::write(&cohorts, bytes).unwrap();
    assert!(matches!(Snapshot::load(&out), Err(Error::Snapshot(_))));

    std::fs::remove_file(out.join(MANIFEST_FILE)).unwrap();
    assert!(Snapshot::load(&out).is_err());
}
