//! Runs the `rkthm` binary end to end: exit codes, manifests and determinism.

use std::path::Path;
use std::process::Command;

use rkthm::app::{sha256_hex, RunManifest};

fn rkthm(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_rkthm"))
        .args(args)
        .env("RKTHM_THREADS", "1")
        .output()
        .expect("binary runs");
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn patch_test_passes_and_records_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rkthm(&["patch-test", "--out", path(dir.path())]), 0);
    let m = RunManifest::load(dir.path()).unwrap();
    let cfg = std::fs::read(dir.path().join("config.json")).unwrap();
    assert_eq!(m.config_hash, sha256_hex(&cfg));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(rkthm(&["validate-heat", "--config", path(&missing), "--out", path(dir.path())]), 2);
    assert_eq!(rkthm(&["simulate-tank", "--out", path(dir.path())]), 2);
    assert_eq!(rkthm(&["compare-swrc", "--out", path(dir.path())]), 2);
    let data = dir.path().join("data.csv");
    std::fs::write(&data, "psi_MPa,S\n1.0,0.5\n2.0,0.4\n").unwrap();
    let cfg = dir.path().join("fit.json");
    std::fs::write(&cfg, format!("{{\"data\": {:?}}}", path(&data))).unwrap();
    assert_eq!(rkthm(&["fit-swrc", "--config", path(&cfg), "--out", path(dir.path())]), 2);
}

#[test]
fn failed_validation_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("patch.json");
    std::fs::write(&cfg, r#"{"tolerance": 1e-30, "nr": 4, "nz": 4, "grading": 1.3}"#).unwrap();
    assert_eq!(rkthm(&["patch-test", "--config", path(&cfg), "--out", path(dir.path())]), 1);
}

#[test]
fn training_is_deterministic_under_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 30}, "max_relative_error": null}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(rkthm(&["train-dnn", "--config", path(&cfg), "--seed", "5", "--out", path(out)]), 0);
    }
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "model.json"), read(&b, "model.json"));
    assert_eq!(read(&a, "metrics.json"), read(&b, "metrics.json"));
    let (ma, mb) = (RunManifest::load(&a).unwrap(), RunManifest::load(&b).unwrap());
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.seeds["init"], 5);

    // the outputs feed back into the other commands
    let model = a.join("model.json");
    let fits = a.join("fits.csv");
    let cmp_cfg = dir.path().join("cmp.json");
    std::fs::write(&cmp_cfg, format!("{{\"fits\": {:?}}}", path(&fits))).unwrap();
    let c = dir.path().join("c");
    assert_eq!(
        rkthm(&["compare-swrc", "--config", path(&cmp_cfg), "--model", path(&model), "--out", path(&c)]),
        0
    );
    assert!(rkthm::swrc_dnn::TrainingSet::read_csv(a.join("dataset.csv")).unwrap().len() == 2671);
}

#[test]
fn fit_swrc_recovers_synthetic_parameters() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rkthm(&["fit-swrc", "--out", path(dir.path())]), 0);
    let fits = rkthm::constitutive::read_fit_csv(dir.path().join("fits.csv")).unwrap();
    assert_eq!(fits.len(), 9);
    let points = rkthm::constitutive::read_retention_csv(dir.path().join("measurements.csv")).unwrap();
    assert_eq!(points.len(), 9 * 7);
}

#[test]
fn short_tank_run_writes_readable_sensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tank.json");
    std::fs::write(
        &cfg,
        r#"{"grid": {"nr": 12, "nz": 6}, "time": {"t_end": 7200.0}, "swrc": {"source": {"kind": "synthetic"}}}"#,
    )
    .unwrap();
    assert_eq!(rkthm(&["simulate-tank", "--config", path(&cfg), "--out", path(dir.path())]), 0);
    let sensors = rkthm::solver::read_sensor_csv(dir.path().join("sensors.csv")).unwrap();
    assert_eq!(sensors.len(), 3 * 6);
}
