//! End-to-end tests of the `vscout` binary: round-trips, exit codes,
//! determinism, and chart output.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vscout() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vscout"))
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("tempdir")
}

/// Small architecture so a detect run takes a fraction of a second.
fn write_fast_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "train": { "hidden": 16, "latent": 8, "learning_rate": 0.001, "max_epochs": 40, "patience": 10, "batch_size": 32 },
  "ensemble": { "knn_k": 5, "lof_k": 10, "iforest_trees": 50 }
}"#,
    )
    .unwrap();
    path
}

fn simulate(dir: &Path, extra: &[&str]) -> (PathBuf, PathBuf) {
    let data = dir.join("data.csv");
    let labels = dir.join("labels.csv");
    let status = vscout()
        .args([
            "simulate",
            "--dist",
            "normal",
            "--n",
            "80",
            "--p",
            "10",
            "--seed",
            "11",
            "--output",
            data.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
        ])
        .args(extra)
        .status()
        .unwrap();
    assert!(status.success());
    (data, labels)
}

fn run(args: &[&str]) -> Output {
    vscout().args(args).output().unwrap()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Minimal XML well-formedness scan: every tag closes, nesting matches.
fn assert_well_formed_xml(text: &str) {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        let after = &rest[start + 1..];
        let end = after.find('>').expect("unclosed tag");
        let tag = &after[..end];
        rest = &after[end + 1..];
        if tag.starts_with('?') || tag.starts_with('!') {
            continue;
        }
        if let Some(name) = tag.strip_prefix('/') {
            let open = stack.pop().unwrap_or_else(|| panic!("stray closing tag {name}"));
            assert_eq!(open, name.trim(), "mismatched tag");
        } else if !tag.ends_with('/') {
            let name: String = tag
                .split_whitespace()
                .next()
                .unwrap()
                .chars()
                .take_while(|c| c.is_alphanumeric())
                .collect();
            stack.push(name);
        }
    }
    assert!(stack.is_empty(), "unclosed tags: {stack:?}");
}

#[test]
fn simulate_then_detect_round_trip() {
    let dir = tempdir();
    let (data, labels) = simulate(
        dir.path(),
        &["--delta", "3", "--gamma", "0.1", "--shift", "transient"],
    );
    let config = write_fast_config(dir.path());
    let record_path = dir.path().join("record.json");
    let out = run(&[
        "detect",
        "--input",
        data.to_str().unwrap(),
        "--truth",
        labels.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "5",
        "--output",
        record_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&record_path).unwrap()).unwrap();
    let observations = record["observations"].as_array().unwrap();
    assert_eq!(observations.len(), 80);
    // Metrics block carries the six reported fields.
    let metrics = &record["metrics"];
    for field in ["recall", "precision", "fpr", "f1", "auroc", "inlier_retention"] {
        assert!(
            !metrics[field].is_null() || field == "recall",
            "missing metric {field}: {metrics}"
        );
    }
    assert_eq!(record["schema_version"], 1);
    assert_eq!(record["seed"], 5);
}

#[test]
fn detect_is_deterministic() {
    let dir = tempdir();
    let (data, _) = simulate(dir.path(), &["--delta", "2", "--gamma", "0.1", "--shift", "sustained"]);
    let config = write_fast_config(dir.path());
    let mut outputs = Vec::new();
    for name in ["a.json", "b.json"] {
        let path = dir.path().join(name);
        let out = run(&[
            "detect",
            "--input",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "42",
            "--output",
            path.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0);
        outputs.push(std::fs::read(&path).unwrap());
    }
    // The whole record is byte-identical, which subsumes the label and
    // indicator columns.
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn malformed_csv_reports_position_and_exits_2() {
    let dir = tempdir();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x1,x2\n1.0,2.0\n3.0,oops\n").unwrap();
    let out = run(&["detect", "--input", bad.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3"), "{stderr}");
    assert!(stderr.contains("column 2"), "{stderr}");

    let ragged = dir.path().join("ragged.csv");
    std::fs::write(&ragged, "x1,x2\n1.0,2.0\n3.0\n").unwrap();
    let out = run(&["detect", "--input", ragged.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 2"));

    let nan = dir.path().join("nan.csv");
    std::fs::write(&nan, "x1,x2\n1.0,2.0\nNaN,1.0\n").unwrap();
    let out = run(&["detect", "--input", nan.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempdir();
    let (data, _) = simulate(dir.path(), &[]);
    let config = dir.path().join("typo.json");
    std::fs::write(&config, r#"{ "trian": { "hidden": 16 } }"#).unwrap();
    let out = run(&[
        "detect",
        "--input",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));
}

#[test]
fn invalid_enum_exits_2() {
    let dir = tempdir();
    let out = run(&[
        "simulate",
        "--dist",
        "cauchy",
        "--output",
        dir.path().join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn truth_length_mismatch_exits_2() {
    let dir = tempdir();
    let (data, _) = simulate(dir.path(), &[]);
    let truth = dir.path().join("short.csv");
    std::fs::write(&truth, "label\n0\n1\n").unwrap();
    let out = run(&[
        "detect",
        "--input",
        data.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn simulate_labels_follow_sustained_block() {
    let dir = tempdir();
    let (_, labels) = simulate(
        dir.path(),
        &["--delta", "1", "--gamma", "0.2", "--shift", "sustained"],
    );
    let text = std::fs::read_to_string(&labels).unwrap();
    let values: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(values.len(), 80);
    for (i, v) in values.iter().enumerate() {
        assert_eq!(*v, if i >= 64 { "1" } else { "0" }, "row {i}");
    }
}

#[test]
fn benchmark_row_accounting_and_worker_invariance() {
    let dir = tempdir();
    let scen = dir.path().join("scenarios.json");
    std::fs::write(
        &scen,
        r#"{
  "pipeline": {
    "train": { "hidden": 16, "latent": 8, "learning_rate": 0.001, "max_epochs": 30, "patience": 10, "batch_size": 32 },
    "ensemble": { "knn_k": 5, "lof_k": 10, "iforest_trees": 50 }
  },
  "scenarios": [
    { "id": "clean", "replications": 3, "dist": "normal", "n": 60, "p": 8, "delta": 0.0, "gamma": 0.0, "shift_type": "none", "seed": 1 },
    { "id": "shifted", "replications": 3, "dist": "t5", "n": 60, "p": 8, "delta": 3.0, "gamma": 0.1, "shift_type": "transient", "seed": 50 }
  ]
}"#,
    )
    .unwrap();
    let out1 = dir.path().join("r1.csv");
    let out2 = dir.path().join("r2.csv");
    for (path, workers) in [(&out1, "1"), (&out2, "2")] {
        let out = run(&[
            "benchmark",
            "--scenarios",
            scen.to_str().unwrap(),
            "--output",
            path.to_str().unwrap(),
            "--workers",
            workers,
        ]);
        assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text1 = std::fs::read_to_string(&out1).unwrap();
    let lines: Vec<&str> = text1.trim_end().lines().collect();
    // Header + 6 detail rows + 2 aggregate rows.
    assert_eq!(lines.len(), 9, "{text1}");
    assert_eq!(
        lines[0],
        "scenario_id,replication,recall,precision,fpr,f1,auroc,inlier_retention,runtime_seconds,error"
    );
    assert_eq!(lines.iter().filter(|l| l.contains(",aggregate,")).count(), 2);

    // Metric columns (everything except runtime) identical across
    // worker counts.
    let strip = |text: &str| -> Vec<Vec<String>> {
        text.trim_end()
            .lines()
            .map(|l| {
                l.split(',')
                    .enumerate()
                    .filter(|(i, _)| *i != 8)
                    .map(|(_, f)| f.to_string())
                    .collect()
            })
            .collect()
    };
    let text2 = std::fs::read_to_string(&out2).unwrap();
    assert_eq!(strip(&text1), strip(&text2));
}

#[test]
fn chart_renders_flags_and_changepoint() {
    let dir = tempdir();
    let data = dir.path().join("data.csv");
    let status = vscout()
        .args([
            "simulate",
            "--dist",
            "normal",
            "--n",
            "150",
            "--p",
            "12",
            "--delta",
            "4",
            "--gamma",
            "0.2",
            "--shift",
            "sustained",
            "--seed",
            "10",
            "--output",
            data.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "train": { "hidden": 16, "latent": 8, "learning_rate": 0.001, "max_epochs": 40, "patience": 10, "batch_size": 32 },
  "ensemble": { "knn_k": 5, "lof_k": 10, "iforest_trees": 50 },
  "pelt": { "penalty": 5.0 }
}"#,
    )
    .unwrap();
    let record_path = dir.path().join("record.json");
    let out = run(&[
        "detect",
        "--input",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "3",
        "--output",
        record_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);

    let chart_path = dir.path().join("chart.svg");
    let out = run(&[
        "chart",
        "--record",
        record_path.to_str().unwrap(),
        "--output",
        chart_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let svg = std::fs::read_to_string(&chart_path).unwrap();
    assert_well_formed_xml(&svg);

    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&record_path).unwrap()).unwrap();
    let flagged = record["observations"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|o| o["y_hat"] == 1)
        .count();
    assert_eq!(svg.matches("<circle").count(), flagged);
    if !record["summary"]["tau_star"].is_null() {
        assert_eq!(svg.matches("tau* =").count(), 1);
    }

    // A record with every flag cleared renders no markers.
    let mut cleared: serde_json::Value = record.clone();
    for obs in cleared["observations"].as_array_mut().unwrap() {
        obs["y_hat"] = 0.into();
    }
    cleared["summary"]["tau_star"] = serde_json::Value::Null;
    let cleared_path = dir.path().join("cleared.json");
    std::fs::write(&cleared_path, serde_json::to_string(&cleared).unwrap()).unwrap();
    let chart2 = dir.path().join("chart2.svg");
    let out = run(&[
        "chart",
        "--record",
        cleared_path.to_str().unwrap(),
        "--output",
        chart2.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let svg2 = std::fs::read_to_string(&chart2).unwrap();
    assert_well_formed_xml(&svg2);
    assert_eq!(svg2.matches("<circle").count(), 0);
    assert_eq!(svg2.matches("tau*").count(), 0);
}

#[test]
fn chart_rejects_malformed_record() {
    let dir = tempdir();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = run(&["chart", "--record", bad.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn simulated_csv_round_trips_losslessly() {
    use vscout_core::simgen::{self, Distribution, ScenarioSpec, ShiftType};
    use vscout_core::RngStream;

    let dir = tempdir();
    let data = dir.path().join("data.csv");
    let status = vscout()
        .args([
            "simulate", "--dist", "lognormal", "--n", "40", "--p", "6",
            "--delta", "1.5", "--gamma", "0.1", "--shift", "transient",
            "--seed", "99", "--output", data.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    // Regenerate the same sample in-process and compare the parsed CSV
    // values bit for bit (shortest round-trip formatting is exact).
    let spec = ScenarioSpec {
        dist: Distribution::Lognormal,
        n: 40,
        p: 6,
        delta: 1.5,
        gamma: 0.1,
        shift_type: ShiftType::Transient,
        seed: 99,
    };
    let sample = simgen::generate(&spec, &mut RngStream::new(99)).unwrap();
    let text = std::fs::read_to_string(&data).unwrap();
    let mut parsed = Vec::new();
    for line in text.lines().skip(1) {
        for field in line.split(',') {
            parsed.push(field.parse::<f64>().unwrap());
        }
    }
    assert_eq!(parsed.len(), sample.x.values().len());
    for (a, b) in parsed.iter().zip(sample.x.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
