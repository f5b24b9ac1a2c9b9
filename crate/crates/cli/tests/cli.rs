use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpgrad::accountant::RdpAccountant;
use dpgrad_cli::report::Table;

fn dpgrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpgrad")).args(args).env_remove("DPGRAD_SEED").output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

const MLP: &str = r#"[
    {"kind": "linear", "in_features": 2, "out_features": 8},
    {"kind": "relu"},
    {"kind": "linear", "in_features": 8, "out_features": 2}
]"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{
            "layers": {MLP},
            "dataset": {{"kind": "blobs", "n": 200}},
            "epochs": 2,
            "sample_rate": 0.1,
            "learning_rate": 0.3,
            "seed_data": 5
            {extra}
        }}"#
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    fs::write(&good, MLP).unwrap();
    let out = dpgrad(&["validate", good.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).is_empty());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"layers": [{"kind": "linear", "in_features": 4, "out_features": 4}, {"kind": "batch_norm", "num_features": 4}]}"#).unwrap();
    let out = dpgrad(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).starts_with("layer=1 kind=batch_norm"));

    let garbled = dir.path().join("garbled.json");
    fs::write(&garbled, "[{\"kind\": \"lstm\"}]").unwrap();
    assert_eq!(dpgrad(&["validate", garbled.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn predict_mem_row() {
    let out = dpgrad(&["predict-mem", "--batch-size", "512", "--params", "171", "--data-size", "1"]);
    assert!(out.status.success());
    let table = Table::from_csv(&stdout(&out)).unwrap();
    let ratio: f64 = table.column("ratio").unwrap()[0].parse().unwrap();
    assert!((ratio - 88235.0 / 854.0).abs() < 1e-12);
    assert_eq!(table.column("regime").unwrap(), vec!["L/C~b"]);

    let md = stdout(&dpgrad(&["predict-mem", "--batch-size", "4", "--params", "10", "--data-size", "1", "--format", "markdown"]));
    assert!(md.starts_with("| b | L | C |"));
}

#[test]
fn account_matches_library() {
    let out = dpgrad(&["account", "--noise-multiplier", "1.1", "--sample-rate", "0.01", "--steps", "300", "--every", "100"]);
    assert!(out.status.success());
    let table = Table::from_csv(&stdout(&out)).unwrap();
    let eps: Vec<f64> = table.column("epsilon").unwrap().iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(eps.len(), 3);
    let mut acct = RdpAccountant::new();
    for (i, got) in eps.iter().enumerate() {
        acct.step(1.1, 0.01, 100).unwrap();
        let want = acct.get_privacy_spent(1e-5).unwrap().epsilon;
        assert!((got - want).abs() <= 1e-12 * want, "row {i}: {got} vs {want}");
    }
}

#[test]
fn account_rejects_bad_schedule() {
    let out = dpgrad(&["account", "--noise-multiplier", "1", "--sample-rate", "0.1", "--steps", "5", "--schedule", r#"{"kind": "custom", "table": []}"#]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "noise_multiplier": 1.0, "seed_noise": 6"#);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for path in [&a, &b] {
        let out = dpgrad(&["train", "--config", cfg.to_str().unwrap(), "--out", path.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let first = fs::read(&a).unwrap();
    assert_eq!(first, fs::read(&b).unwrap());

    let other = dpgrad(&["train", "--config", cfg.to_str().unwrap(), "--seed-noise", "7"]);
    assert_ne!(stdout(&other).as_bytes(), first.as_slice());
}

#[test]
fn train_with_target_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "target_epsilon": 4.0, "delta": 1e-4"#);
    let out = dpgrad(&["train", "--config", cfg.to_str().unwrap(), "--format", "markdown"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("| epoch | sigma |"));
    let last = text.lines().last().unwrap();
    let eps: f64 = last.trim_matches('|').split('|').nth(6).unwrap().trim().parse().unwrap();
    assert!(eps <= 4.0 && eps > 3.0, "final epsilon {eps}");
}

#[test]
fn train_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "noise_multiplier": 1.0, "noise_multipler": 2.0"#);
    let out = dpgrad(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_multipler"));

    let cfg = write_config(dir.path(), "");
    assert_eq!(dpgrad(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let out = dpgrad(&["train", "--config", cfg.to_str().unwrap(), "--plain"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = Table::from_csv(&stdout(&out)).unwrap();
    assert_eq!(table.rows().len(), 3);
}

#[test]
fn train_rejects_batch_norm_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(&model, r#"[{"kind": "linear", "in_features": 2, "out_features": 4}, {"kind": "batch_norm", "num_features": 4}, {"kind": "linear", "in_features": 4, "out_features": 2}]"#).unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"model_file": "model.json", "dataset": {"kind": "blobs", "n": 50}, "sample_rate": 0.2, "noise_multiplier": 1.0, "seed_data": 1}"#,
    )
    .unwrap();
    let out = dpgrad(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("layer=1 kind=batch_norm"));
}

/// Snapshot of a seeded run. Set `DPGRAD_UPDATE_GOLDEN=1` to rewrite it after
/// an intended numerical change.
#[test]
fn seeded_run_matches_snapshot() {
    let cfg = golden_dir().join("blobs_small.json");
    let expected = golden_dir().join("blobs_small.csv");
    let out = dpgrad(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    if std::env::var_os("DPGRAD_UPDATE_GOLDEN").is_some() {
        fs::write(&expected, &out.stdout).unwrap();
    }
    assert_eq!(stdout(&out), fs::read_to_string(&expected).unwrap());
}

#[test]
fn microbench_rows() {
    let out = dpgrad(&["microbench", "--layers", "linear,embedding", "--batch-sizes", "2", "--repeats", "2", "--input-batches", "1", "--warmup", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = Table::from_csv(&stdout(&out)).unwrap();
    assert_eq!(table.rows().len(), 6);
    assert_eq!(table.column("mode").unwrap()[..3], ["plain", "vectorized", "microbatch"]);
}
