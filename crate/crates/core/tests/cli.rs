use std::path::{Path, PathBuf};
use std::process::Command;

use fedids::experiment::{run_experiment, validate_config, ExperimentConfig, Mode};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn config(name: &str) -> PathBuf {
    configs_dir().join(name)
}

fn fedids(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedids")).args(args).output().unwrap()
}

#[test]
fn shipped_configs_validate_clean() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let v = validate_config(&path).unwrap();
            assert!(v.is_empty(), "{}: {v:?}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 6);
}

#[test]
fn validate_exit_codes() {
    let ok = fedids(&["validate", "--config", config("central.toml").to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("csv-two-sites.toml")).unwrap();
    let single = text.split("[[clients]]").take(2).collect::<Vec<_>>().join("[[clients]]");
    let bad = dir.path().join("single.toml");
    std::fs::write(&bad, single.replace("../tests", &format!("{}/tests", env!("CARGO_MANIFEST_DIR")))).unwrap();
    let out = fedids(&["validate", "-c", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("allow_single_client"));

    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "schema_version = 1\nname = [\n").unwrap();
    let out = fedids(&["validate", "-c", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let missing = fedids(&["validate", "-c", "/nonexistent/x.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/x.toml"));
}

#[test]
fn missing_data_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("csv-two-sites.toml")).unwrap();
    let moved = dir.path().join("moved.toml");
    std::fs::write(&moved, text).unwrap();
    let out = fedids(&["run", "-c", moved.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("site-a.csv not found"));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "").unwrap();
    let out = fedids(&["run", "-c", config("csv-two-sites.toml").to_str().unwrap(), "--out", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

const DETERMINISTIC: [&str; 8] = [
    "config.resolved.toml",
    "scaler.csv",
    "rounds.csv",
    "loss_curve.csv",
    "report.json",
    "report.txt",
    "checkpoints/ae-final.ckpt",
    "checkpoints/clf-final.ckpt",
];

#[test]
fn socket_run_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = fedids(&["run", "-c", config("csv-two-sites.toml").to_str().unwrap(), "-o", d.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let run = |d: &tempfile::TempDir| d.path().join("csv-two-sites/seed-1");
    for f in DETERMINISTIC {
        assert_eq!(std::fs::read(run(&a).join(f)).unwrap(), std::fs::read(run(&b).join(f)).unwrap(), "{f}");
    }
    assert!(run(&a).join("meta.json").is_file());

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run(&a).join("report.json")).unwrap()).unwrap();
    assert_eq!(report["transport"]["raw_row_messages"], 0);
    assert!(report["f1"].as_f64().unwrap() > 0.9);
}

#[test]
fn seed_override_changes_directory_and_result() {
    let d = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&config("csv-two-sites.toml")).unwrap();
    let a = run_experiment(&cfg, Some(5), Some(d.path())).unwrap();
    assert!(a.output_dir.unwrap().ends_with("csv-two-sites/seed-5"));
    let b = run_experiment(&cfg, None, None).unwrap();
    assert_ne!(a.report.f1.to_bits(), b.report.f1.to_bits());
    let echoed = std::fs::read_to_string(d.path().join("csv-two-sites/seed-5/config.resolved.toml")).unwrap();
    assert!(echoed.contains("seed = 5"));
}

#[test]
fn central_mode_matches_single_client_federation() {
    let mut central = ExperimentConfig::load(&config("central.toml")).unwrap();
    central.clients.truncate(1);
    central.threshold_baseline = false;
    let mut fed = central.clone();
    fed.mode = Mode::Federated;
    assert!(!fed.violations().is_empty());
    fed.allow_single_client = true;

    let c = run_experiment(&central, None, None).unwrap();
    let f = run_experiment(&fed, None, None).unwrap();
    assert_eq!(c.report.evaluations, f.report.evaluations);
    assert_eq!(c.pipeline.ae.params(), f.pipeline.ae.params());
    assert_eq!(c.pipeline.clf.params(), f.pipeline.clf.params());
}

#[test]
fn unknown_data_excludes_benign_only_client_from_classifier() {
    let cfg = ExperimentConfig::load(&config("unknown-data.toml")).unwrap();
    let out = run_experiment(&cfg, None, None).unwrap();
    assert_eq!(out.report.clients, ["benign-only", "lab-a", "lab-b"]);
    assert_eq!(out.report.classifier_clients, ["lab-a", "lab-b"]);
    assert_eq!(out.report.test_rows, 2000);
    let clf_counts: Vec<_> = out
        .logs
        .iter()
        .filter(|l| l.phase.name() == "clf")
        .map(|l| l.per_client_counts.contains_key("benign-only"))
        .collect();
    assert!(!clf_counts.is_empty() && clf_counts.iter().all(|&x| !x));
}
