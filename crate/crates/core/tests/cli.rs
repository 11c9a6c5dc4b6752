use std::path::Path;
use std::process::{Command, Output};

fn stfnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stfnn"))
        .args(args)
        .current_dir(cwd)
        .env("STF_LOG_LEVEL", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &str = r#"{
  "data": { "synthetic": { "n_stations": 16, "hours": 60, "seed": 11 } },
  "model": { "hidden_dim": 8, "m_steps": 2 },
  "train": { "epochs": 2, "k_spatial": 3, "t_hist": 2, "mask_ratio": 0.25,
             "max_samples_per_epoch": 24, "max_val_samples": 16 },
  "eval": { "ratios": [0.25, 0.5] },
  "diagnostics": { "q": 8, "checkpoint_epochs": [1, 2] },
  "output_dir": "out",
  "seed": 5
}"#;

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), TINY).unwrap();
    dir
}

#[test]
fn full_pipeline() {
    let dir = tiny_dir();
    let d = dir.path();
    let out = d.join("out");

    ok(&stfnn(&["synth", "--config", "cfg.json"], d));
    let csv = std::fs::read(out.join("observations.csv")).unwrap();
    assert!(out.join("oracle.json").exists());
    ok(&stfnn(&["synth", "--config", "cfg.json"], d));
    assert_eq!(std::fs::read(out.join("observations.csv")).unwrap(), csv);

    let stdout = ok(&stfnn(&["train", "--config", "cfg.json"], d));
    assert!(stdout.contains("best epoch"), "{stdout}");
    assert!(out.join("model.ckpt.json").exists());
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let table = ok(&stfnn(&["eval", "--config", "cfg.json"], d));
    for name in ["STFNN", "KNN", "IDW+SES", "mean"] {
        assert!(table.contains(name), "{table}");
    }
    let report = std::fs::read(out.join("eval_report.json")).unwrap();
    ok(&stfnn(&["eval", "--config", "cfg.json"], d));
    assert_eq!(std::fs::read(out.join("eval_report.json")).unwrap(), report);

    let curl = ok(&stfnn(&["curl-report", "--config", "cfg.json"], d));
    assert_eq!(curl.lines().count(), 2, "{curl}");
    let series: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(out.join("curl_report.json")).unwrap()).unwrap();
    assert_eq!(series.len(), 2);
    assert!(series.iter().all(|p| p["mean_curl_norm"].as_f64().unwrap() > 0.0));

    let json = ok(&stfnn(
        &["infer", "--config", "cfg.json", "--lng", "110.5", "--lat", "32.0", "--time", "2024-01-02T06:30:00Z"],
        d,
    ));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let neighbors = v["neighbors"].as_array().unwrap();
    assert_eq!(neighbors.len(), 6);
    let w: f64 = neighbors.iter().map(|n| n["weight"].as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-9);
    let blended: f64 = neighbors
        .iter()
        .map(|n| n["weight"].as_f64().unwrap() * n["estimate"].as_f64().unwrap())
        .sum();
    assert!((blended - v["estimate"].as_f64().unwrap()).abs() < 1e-6);
    assert_eq!(v["timestep"], "2024-01-02T06:00:00+00:00");
}

#[test]
fn infer_with_explicit_checkpoint_and_data() {
    let dir = tiny_dir();
    let d = dir.path();
    ok(&stfnn(&["synth", "--config", "cfg.json"], d));
    ok(&stfnn(&["train", "--config", "cfg.json"], d));
    std::fs::write(
        d.join("schema_only.json"),
        r#"{ "data": { "csv": "out/observations.csv",
             "schema": { "numeric_features": ["grad_x", "grad_y", "grad_tau", "noise_a", "noise_b"] } },
             "train": { "k_spatial": 2, "t_hist": 1 } }"#,
    )
    .unwrap();
    let json = ok(&stfnn(
        &[
            "infer", "--checkpoint", "out/model.ckpt.json", "--data", "out/observations.csv",
            "--config", "schema_only.json", "--lng", "-0.0", "--lat", "30", "--time", "2024-01-01 12:00",
        ],
        d,
    ));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["neighbors"].as_array().unwrap().len(), 2);
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{ "train": { "epochz": 3 }, "colour": 1 }"#).unwrap();
    let out = stfnn(&["train", "--config", "bad.json"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.epochz") && err.contains("colour"), "{err}");

    let out = stfnn(&["eval", "--config", "missing.json"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let out = stfnn(&["infer", "--lng", "1", "--lat", "2", "--time", "2024-01-01"], d);
    assert_ne!(out.status.code(), Some(0));

    let out = stfnn(&["frobnicate"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_runs_invariant_suite() {
    let dir = tiny_dir();
    let stdout = ok(&stfnn(&["check", "--config", "cfg.json"], dir.path()));
    assert!(stdout.lines().count() >= 10, "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}
