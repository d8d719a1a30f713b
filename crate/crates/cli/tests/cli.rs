use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nigdate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nigdate"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = nigdate(args);
    assert!(
        out.status.success(),
        "nigdate {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_selective() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&["generate", "--out", s(&corpus), "--pages-per-codex", "5", "--page-side", "448", "--seed", "3"]);
    assert!(corpus.join("corpus.json").exists());
    assert!(corpus.join("manifest.csv").exists());
    assert!(!corpus.join("INCOMPLETE").exists());
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(corpus.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(echo["corpus"]["synth"]["pages_per_codex"], 5);
    assert_eq!(echo["corpus"]["synth"]["seed"], 3);
    let manifest = fs::read_to_string(corpus.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 15);

    let train_cfg = tmp.path().join("train.json");
    fs::write(
        &train_cfg,
        r#"{"train": {"epochs": 2, "extractor": {"input_side": 8, "hidden_widths": [16], "dropout_rate": 0.3, "feature_dim": 8}}}"#,
    )
    .unwrap();
    let model = tmp.path().join("model");
    ok(&["train", "--config", s(&train_cfg), "--corpus", s(&corpus), "--out", s(&model), "--method", "evidential"]);
    assert!(model.join("model.json").exists());
    assert_eq!(fs::read_to_string(model.join("history.csv")).unwrap().lines().count(), 1 + 2);

    let eval = tmp.path().join("eval");
    let out = ok(&["evaluate", "--corpus", s(&corpus), "--model", s(&model), "--out", s(&eval), "--features"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("evidential: MAE"));
    for f in ["report.json", "predictions.json", "calibration-curve.csv", "error-cdf.csv", "selective.csv", "reliability.csv", "features.csv"] {
        assert!(eval.join(f).exists(), "missing {f}");
    }

    let sel = tmp.path().join("sel");
    ok(&[
        "selective",
        "--predictions",
        s(&eval.join("predictions.json")),
        "--out",
        s(&sel),
        "--fractions",
        "0.5,1.0",
        "--key",
        "aleatoric",
    ]);
    let table = fs::read_to_string(sel.join("selective.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn failed_run_leaves_marker_and_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("train");
    let out = nigdate(&["train", "--corpus", s(&tmp.path().join("missing")), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(out_dir.join("INCOMPLETE").exists());
    assert!(out_dir.join("resolved_config.json").exists());
}

#[test]
fn malformed_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{ not json").unwrap();
    let out = nigdate(&["generate", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("parsing config"));
}
