use std::fs;
use std::path::{Path, PathBuf};

use rubric_aqa::data::{self, GeneratorConfig};
use rubric_aqa::engine::{self, corpus_for, EngineError, Mode, Predictor, RunConfig, Trainer};
use rubric_aqa::model::ModelConfig;

fn small_data(dir: &Path) -> PathBuf {
    let cfg = GeneratorConfig {
        out_dir: dir.join("data"),
        n_train: 12,
        n_test: 10,
        t: 8,
        d_feat: 6,
        d_text: 4,
        catalog_size: 4,
        stages: 2,
        k_min: 1,
        k_max: 3,
        seed: 3,
        ..GeneratorConfig::default()
    };
    data::generate_dataset(&cfg).unwrap()
}

fn small_run(dir: &Path, manifest: PathBuf, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        manifest,
        output_dir: dir.join("run"),
        model: ModelConfig { d_model: 8, heads: 2, ..ModelConfig::default() },
        n_inference_samples: 3,
        d_text: 4,
        seed: 5,
        ..RunConfig::default()
    };
    cfg.optimizer.epochs = epochs;
    cfg.optimizer.batch_size = 4;
    cfg
}

#[test]
fn train_writes_checkpoints_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let mut cfg = small_run(dir.path(), manifest, 2);
    cfg.checkpoint_every = 1;
    let (final_path, logs) = engine::train(&cfg).unwrap();

    assert_eq!(logs.len(), 2);
    assert_eq!(logs[1].steps, 6);
    for name in ["epoch-0001.rack", "epoch-0002.rack", "final.rack"] {
        assert!(cfg.output_dir.join(name).is_file(), "{name}");
    }
    assert_eq!(fs::read(&final_path).unwrap(), fs::read(cfg.output_dir.join("epoch-0002.rack")).unwrap());

    let log = fs::read_to_string(cfg.output_dir.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,steps,lr_scale,mse,kl,sparsity,ranking,beta,total");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,3,"));

    let predictor = Predictor::load(&final_path).unwrap();
    let corpus = corpus_for(&predictor).unwrap();
    let (report, records) = predictor.evaluate(&corpus.test).unwrap();
    assert_eq!(report.n, 10);
    assert!(report.srcc.is_finite() && report.r_l2.is_finite());
    assert!(report.kendall_tau.is_some() && report.pointing_accuracy.is_some());
    assert!(records.iter().all(|r| r.uncertainty.unwrap() > 0.0));

    let mut csv = Vec::new();
    engine::write_records_csv(&mut csv, &records).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("sample_id,predicted,truth,uncertainty,peaks,intervals\n"));
    assert_eq!(csv.lines().count(), 11);
    let first = records[0].peaks.as_ref().unwrap().len();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4].split(' ').count(), first);
    assert!(row[5].split(' ').all(|iv| iv.contains('-')));
}

#[test]
fn evaluation_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let cfg = small_run(dir.path(), manifest, 1);
    let (path, _) = engine::train(&cfg).unwrap();
    let predictor = Predictor::load(&path).unwrap();
    let corpus = corpus_for(&predictor).unwrap();
    let (a, _) = predictor.evaluate(&corpus.test).unwrap();
    let (b, _) = predictor.evaluate(&corpus.test).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());

    // The schedule depends on the epoch count, so the interrupted run is a
    // periodic checkpoint of the same 4-epoch configuration.
    let mut straight = small_run(&dir.path().join("a"), manifest.clone(), 4);
    straight.checkpoint_every = 2;
    let (straight_path, _) = engine::train(&straight).unwrap();

    let mut resumed = small_run(&dir.path().join("b"), manifest, 4);
    resumed.resume = Some(straight.output_dir.join("epoch-0002.rack"));
    let (resumed_path, logs) = engine::train(&resumed).unwrap();

    assert_eq!(logs.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![3, 4]);
    let a = Trainer::load(&straight_path).unwrap();
    let b = Trainer::load(&resumed_path).unwrap();
    assert_eq!(a.checkpoint_bytes(), b.checkpoint_bytes());
    assert_eq!(a.step(), 12);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let cfg = small_run(dir.path(), manifest, 1);
    let (path, _) = engine::train(&cfg).unwrap();
    let bytes = fs::read(&path).unwrap();
    let t = Trainer::from_checkpoint_bytes(&bytes, &path).unwrap();
    assert_eq!(t.checkpoint_bytes(), bytes);
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let cfg = small_run(dir.path(), manifest, 1);
    let (path, _) = engine::train(&cfg).unwrap();
    let bytes = fs::read(&path).unwrap();

    for bad in [&bytes[..bytes.len() / 2], &bytes[..3], b"nope, not a checkpoint".as_slice()] {
        let err = Trainer::from_checkpoint_bytes(bad, &path).err().unwrap();
        assert!(matches!(err, EngineError::Format { .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    assert_eq!(Trainer::from_checkpoint_bytes(&flipped, &path).err().unwrap().exit_code(), 3);

    let err = Trainer::load(&dir.path().join("missing.rack")).err().unwrap();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn config_errors_exit_with_two() {
    for text in [
        r#"{"no_such_key": 1}"#,
        r#"{"optimizer": {"epochs": 0}}"#,
        r#"{"n_inference_samples": 0}"#,
        r#"{"loss": {"beta_max": -1.0}}"#,
        r#"{"mode": "sometimes"}"#,
        "not json",
    ] {
        let err = RunConfig::from_json(text).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{text}: {err}");
    }
    assert!(RunConfig::from_json("{}").is_ok());
}

#[test]
fn missing_or_corrupt_data_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), dir.path().join("nowhere/manifest.json"), 1);
    assert_eq!(engine::train(&cfg).unwrap_err().exit_code(), 3);

    let manifest = small_data(dir.path());
    let sample = fs::read_dir(dir.path().join("data/samples")).unwrap().next().unwrap().unwrap().path();
    let bytes = fs::read(&sample).unwrap();
    fs::write(&sample, &bytes[..bytes.len() - 5]).unwrap();
    let cfg = small_run(dir.path(), manifest, 1);
    assert_eq!(engine::train(&cfg).unwrap_err().exit_code(), 3);
}

#[test]
fn deterministic_checkpoints_refuse_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let mut cfg = small_run(dir.path(), manifest, 1);
    cfg.mode = Mode::Deterministic;
    let (path, _) = engine::train(&cfg).unwrap();
    let predictor = Predictor::load(&path).unwrap();
    let corpus = corpus_for(&predictor).unwrap();
    let err = predictor.calibration(&corpus.test).unwrap_err();
    assert!(matches!(err, EngineError::UnsupportedMode(_)));
    assert_eq!(err.exit_code(), 2);

    let (report, records) = predictor.evaluate(&corpus.test).unwrap();
    assert!(report.kendall_tau.is_none());
    assert!(records.iter().all(|r| r.uncertainty.is_none()));
}

#[test]
fn resume_rejects_a_different_rubric() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_data(dir.path());
    let (path, _) = engine::train(&small_run(dir.path(), manifest, 1)).unwrap();

    let other = GeneratorConfig {
        out_dir: dir.path().join("other"),
        n_train: 6,
        n_test: 4,
        t: 8,
        d_feat: 6,
        d_text: 4,
        catalog_size: 5,
        k_max: 3,
        ..GeneratorConfig::default()
    };
    let other_manifest = data::generate_dataset(&other).unwrap();
    let mut cfg = small_run(&dir.path().join("r"), other_manifest, 2);
    cfg.resume = Some(path);
    assert_eq!(engine::train(&cfg).unwrap_err().exit_code(), 2);
}
