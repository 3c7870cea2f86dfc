use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graft::{write_snapshot, ConfigFile, Execution};
use graft_core::model::{build_model, ArchSpec};
use graft_core::Tensor;
use serde_json::Value;

fn graft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graft")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = graft(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Error line printed on failure; asserts a nonzero exit and a single line.
fn fails(args: &[&str]) -> String {
    let out = graft(args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    err
}

fn short_config(dir: &Path, epochs: usize, execution: Execution) -> PathBuf {
    let mut cfg = ConfigFile::toy(2, 4);
    cfg.execution = execution;
    cfg.experiment.total_epochs = epochs;
    for w in &mut cfg.experiment.workers {
        w.epochs = epochs;
    }
    let path = dir.join(format!("cfg-{execution:?}.toml"));
    fs::write(&path, cfg.render()).unwrap();
    path
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema").join(name);
    let schema: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_all_zero_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model(&ArchSpec::default(), 0).unwrap();
    for l in &mut m.layers {
        l.weights = Tensor::zeros(l.weights.shape()).unwrap();
    }
    let snap = dir.path().join("zero.snap");
    write_snapshot(&m, &snap).unwrap();
    let report: Value = serde_json::from_str(&ok(&["analyze", "--snapshot", s(&snap)])).unwrap();
    let ratios = report["invalid_ratio"].as_array().unwrap();
    assert_eq!(ratios.len(), 4);
    assert!(ratios.iter().all(|r| r["ratio"] == 1.0));
    assert_eq!(report["network_information"], 0.0);
    assert_valid(&schema("diagnostics_report.schema.json"), &report);
}

#[test]
fn analyze_with_peer_and_config_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.snap"), dir.path().join("b.snap"));
    write_snapshot(&build_model(&ArchSpec::default(), 1).unwrap(), &a).unwrap();
    write_snapshot(&build_model(&ArchSpec::default(), 2).unwrap(), &b).unwrap();
    let cfg = short_config(dir.path(), 1, Execution::Sequential);
    let text = ok(&[
        "analyze",
        "--snapshot",
        s(&a),
        "--peer",
        s(&b),
        "--config",
        s(&cfg),
        "--thresholds",
        "0.5,1,2",
    ]);
    let report: Value = serde_json::from_str(&text).unwrap();
    assert_valid(&schema("diagnostics_report.schema.json"), &report);
    assert_eq!(report["iou"].as_array().unwrap().len(), 2);
    assert_eq!(report["invalid_ratio"].as_array().unwrap().len(), 3);
    assert_eq!(report["metadata"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn graft_checkpoints_with_itself_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("m.snap");
    let out = dir.path().join("out.snap");
    write_snapshot(&build_model(&ArchSpec::default(), 9).unwrap(), &snap).unwrap();
    let cfg = short_config(dir.path(), 1, Execution::Sequential);
    ok(&["graft-checkpoints", "--self", s(&snap), "--peer", s(&snap), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(fs::read(&snap).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn graft_checkpoints_rejects_incompatible_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.snap"), dir.path().join("b.snap"));
    write_snapshot(&build_model(&ArchSpec::default(), 1).unwrap(), &a).unwrap();
    let mut arch = ArchSpec::default();
    arch.conv[1].out_channels = 8;
    write_snapshot(&build_model(&arch, 1).unwrap(), &b).unwrap();
    let cfg = short_config(dir.path(), 1, Execution::Sequential);
    let err = fails(&["graft-checkpoints", "--self", s(&a), "--peer", s(&b), "--config", s(&cfg), "--out", "x"]);
    assert!(err.starts_with("error[graft]:"), "{err}");
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let good = fs::read_to_string(short_config(dir.path(), 1, Execution::Sequential)).unwrap();
    let bad = dir.path().join("bad.toml");

    fs::write(&bad, good.replacen("momentum", "momentun", 1)).unwrap();
    let err = fails(&["train", "--config", s(&bad), "--out-dir", s(dir.path())]);
    assert!(err.starts_with("error[config]:") && err.contains("momentun"), "{err}");

    fs::write(&bad, good.replacen("bin_count = 10", "bin_count = 0", 1)).unwrap();
    let err = fails(&["train", "--config", s(&bad), "--out-dir", s(dir.path())]);
    assert!(err.starts_with("error[config]:") && err.contains("bin_count"), "{err}");

    let err = fails(&["analyze", "--snapshot", s(&bad)]);
    assert!(err.starts_with("error[snapshot-magic]:"), "{err}");
}

#[test]
fn train_is_deterministic_across_runs_and_executors() {
    let dir = tempfile::tempdir().unwrap();
    let conc = short_config(dir.path(), 3, Execution::Concurrent);
    let seq = short_config(dir.path(), 3, Execution::Sequential);
    let runs = [("a", &conc), ("b", &conc), ("c", &seq)];
    for (name, cfg) in runs {
        ok(&["train", "--config", s(cfg), "--out-dir", s(&dir.path().join(name))]);
    }
    for file in ["worker0.snap", "worker1.snap", "history.csv", "layer_entropy.csv", "alphas.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(file)).unwrap(), "{file}");
        assert_eq!(a, fs::read(dir.path().join("c").join(file)).unwrap(), "{file}");
    }

    let alphas: Value = serde_json::from_slice(&fs::read(dir.path().join("a/alphas.json")).unwrap()).unwrap();
    assert_valid(&schema("alpha_log.schema.json"), &alphas);
    assert_eq!(alphas.as_array().unwrap().len(), 3 * 2 * 3);

    let report = ok(&["report", "--history", s(&dir.path().join("a"))]);
    assert_eq!(report.lines().count(), 4);
    let out = dir.path().join("curves.csv");
    ok(&["report", "--history", s(&dir.path().join("a")), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(out).unwrap(), report);
}

#[test]
fn init_config_round_trips() {
    let text = ok(&["init-config", "--workers", "3", "--seed", "5"]);
    let (cfg, warnings) = ConfigFile::parse(&text).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(cfg, ConfigFile::toy(3, 5));
}
