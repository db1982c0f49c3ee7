use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn raqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raqa")).args(args).output().expect("raqa runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_json(path: &Path, v: serde_json::Value) -> String {
    fs::write(path, v.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

/// Generate a small dataset and train for two epochs; returns the checkpoint path.
fn pipeline(dir: &Path, mode: &str) -> String {
    let data_dir = dir.join("data");
    let gen = write_json(
        &dir.join("gen.json"),
        serde_json::json!({
            "out_dir": data_dir, "n_train": 12, "n_test": 10, "t": 8, "d_feat": 6, "d_text": 4,
            "catalog_size": 4, "stages": 2, "k_min": 1, "k_max": 3, "seed": 1
        }),
    );
    let o = raqa(&["gen-data", "--config", &gen]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("12 train and 10 test"));

    let run = write_json(
        &dir.join("run.json"),
        serde_json::json!({
            "manifest": data_dir.join("manifest.json"),
            "output_dir": dir.join("run"),
            "model": { "d_model": 8, "heads": 2 },
            "optimizer": { "epochs": 2, "batch_size": 4 },
            "mode": mode,
            "n_inference_samples": 3,
            "d_text": 4
        }),
    );
    let o = raqa(&["train", "--config", &run]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("epoch 2 "));
    assert!(dir.join("run/train_log.csv").is_file());
    dir.join("run/final.rack").to_str().unwrap().to_string()
}

#[test]
fn generate_train_evaluate_predict_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pipeline(dir.path(), "stochastic");

    let records = dir.path().join("records.csv");
    let o = raqa(&["eval", "--ckpt", &ckpt, "--split", "test", "--records", records.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["n"], 10);
    assert!(report["srcc"].is_f64() && report["kendall_tau"].is_f64() && report["pointing_accuracy"].is_f64());
    assert_eq!(fs::read_to_string(&records).unwrap().lines().count(), 11);

    let o = raqa(&["eval", "--ckpt", &ckpt, "--split", "train"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["n"], 12);

    let sample = fs::read_dir(dir.path().join("data/samples")).unwrap().next().unwrap().unwrap().path();
    let o = raqa(&["predict", "--ckpt", &ckpt, "--sample", sample.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("\nscore ") && text.contains("\nscore_raw ") && text.contains("\nuncertainty "));
    assert!(text.lines().any(|l| l.starts_with("step 0 type ")));

    let curve = dir.path().join("calibration.csv");
    let o = raqa(&["calibration", "--ckpt", &ckpt, "--out", curve.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&curve).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# kendall_tau="));
    assert_eq!(lines[1], "bin,mean_uncertainty,mae");
    assert_eq!(lines.len(), 12);
    let stated: f64 = lines[0].trim_start_matches("# kendall_tau=").parse().unwrap();
    assert!((stated * 45.0 - (stated * 45.0).round()).abs() < 1e-9);
}

#[test]
fn deterministic_checkpoint_has_no_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pipeline(dir.path(), "deterministic");
    let out = dir.path().join("c.csv");
    let o = raqa(&["calibration", "--ckpt", &ckpt, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = raqa(&["predict", "--ckpt", &ckpt, "--sample", dir.path().join("data/samples").read_dir().unwrap().next().unwrap().unwrap().path().to_str().unwrap()]);
    assert!(stdout(&o).contains("uncertainty none"));
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_json(&dir.path().join("bad.json"), serde_json::json!({ "n_train": 1, "unknown": true }));
    assert_eq!(raqa(&["gen-data", "--config", &bad]).status.code(), Some(2));
    let invalid = write_json(&dir.path().join("invalid.json"), serde_json::json!({ "k_min": 4, "k_max": 2 }));
    assert_eq!(raqa(&["gen-data", "--config", &invalid]).status.code(), Some(2));
    assert_eq!(raqa(&["gen-data", "--config", "/nonexistent/gen.json"]).status.code(), Some(2));

    let run = write_json(&dir.path().join("run.json"), serde_json::json!({ "optimizer": { "epochs": 0 } }));
    assert_eq!(raqa(&["train", "--config", &run]).status.code(), Some(2));
    assert_eq!(raqa(&["train", "--config", "/nonexistent/run.json"]).status.code(), Some(2));
}

#[test]
fn data_problems_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let run = write_json(
        &dir.path().join("run.json"),
        serde_json::json!({ "manifest": dir.path().join("missing/manifest.json"), "output_dir": dir.path().join("out") }),
    );
    assert_eq!(raqa(&["train", "--config", &run]).status.code(), Some(3));

    let junk = dir.path().join("junk.rack");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    assert_eq!(raqa(&["eval", "--ckpt", junk.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(raqa(&["eval", "--ckpt", "/nonexistent.rack"]).status.code(), Some(3));
}

#[test]
fn fast_acceptance_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = raqa(&["accept", "--suite", "fast", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert!(lines.iter().all(|l| l.starts_with("[PASS] criterion")), "{lines:?}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["criteria"].as_array().unwrap().len(), lines.len());
}

#[test]
fn usage_errors_are_rejected() {
    assert!(!raqa(&["eval"]).status.success());
    assert!(!raqa(&["frobnicate"]).status.success());
    assert!(raqa(&["--help"]).status.success());
}
