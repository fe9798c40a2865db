use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use calibreg::cli::{CalibrationReport, EXIT_DIVERGED, EXIT_FAILURE, EXIT_INVALID, OUT_ENV};

const SMALL: &str = r#"{
  "dataset": {"kind": "blobs", "k": 3, "n": 300, "d": 4, "spread": 0.3, "seed": 2},
  "train": {"epochs": 3, "batch_size": 32, "lr": 0.05,
            "architecture": {"hidden": [16]}},
  "ood": {"mode": "shifted_mean", "n": 50, "seed": 1},
  "repeats": 2
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_calibreg"));
    c.env_remove(OUT_ENV);
    c
}

fn run(args: &[&str]) -> i32 {
    let out = bin().args(args).output().unwrap();
    out.status.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Relative path -> bytes for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let args = ["--seed", "1", "--out", s(d), "gen-data", "blobs", "--k", "10", "--n", "10000", "--split"];
        assert_eq!(run(&args), 0);
    }
    assert_eq!(snapshot(&a), snapshot(&b));
    let text = std::fs::read_to_string(a.join("dataset.csv")).unwrap();
    assert_eq!(text.lines().count(), 10_000 + 2);
    assert_eq!(run(&["--out", s(&a), "gen-data", "blobs", "--k", "1"]), EXIT_INVALID);
}

#[test]
fn train_writes_identical_outputs_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(run(&["--config", s(&cfg), "--out", s(d), "train"]), 0);
    }
    let snap = snapshot(&a);
    assert_eq!(snap, snapshot(&b));
    for f in ["report.json", "reliability.csv", "entropy_histogram.csv", "run0/model.json", "run1/history.csv"] {
        assert!(snap.contains_key(Path::new(f)), "missing {f}");
    }
    let report = CalibrationReport::from_json(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.tag, "vanilla");
    assert_eq!(report.runs.len(), 2);
    assert!(report.is_finite());
    for r in &report.runs {
        assert_eq!(r.temperature_scaling.before.accuracy, r.temperature_scaling.after.accuracy);
    }
}

#[test]
fn exit_codes_separate_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(run(&["--config", "/nonexistent/cfg.json", "--out", s(&out), "train"]), EXIT_FAILURE);
    let bad = write(tmp.path(), "bad.json", &SMALL.replace("\"lr\": 0.05", "\"lr\": -1"));
    assert_eq!(run(&["--config", s(&bad), "--out", s(&out), "train"]), EXIT_INVALID);
    let typo = write(tmp.path(), "typo.json", &SMALL.replace("\"repeats\"", "\"repeat\""));
    assert_eq!(run(&["--config", s(&typo), "--out", s(&out), "train"]), EXIT_INVALID);
    let wild = write(
        tmp.path(),
        "wild.json",
        &SMALL.replace("\"lr\": 0.05", "\"lr\": 1e12, \"momentum\": 0.0"),
    );
    assert_eq!(run(&["--config", s(&wild), "--out", s(&out), "train"]), EXIT_DIVERGED);
}

#[test]
fn environment_overrides_the_out_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let (flag, env) = (tmp.path().join("flag"), tmp.path().join("env"));
    let status = bin()
        .env(OUT_ENV, &env)
        .args(["--out", s(&flag), "gen-data", "two-moons", "--n", "40"])
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(env.join("dataset.csv").exists());
    assert!(!flag.exists());
}

#[test]
fn sweep_selects_the_best_validation_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep_cfg = SMALL.replace(
        "\"repeats\": 2",
        "\"repeats\": 2, \"grid\": [{\"param\": \"train.weight_decay\", \"values\": [0, 0.0001, 0.01]}]",
    );
    let cfg = write(tmp.path(), "sweep.json", &sweep_cfg);
    let out = tmp.path().join("s");
    assert_eq!(run(&["--config", s(&cfg), "--out", s(&out), "--jobs", "2", "sweep"]), 0);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines().skip(1);
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 2);

    // Manual argmax of mean validation accuracy, ties to lower validation NLL.
    let mut means: Vec<(usize, f64, f64)> = (0..3)
        .map(|p| {
            let pts: Vec<&Vec<&str>> = rows.iter().filter(|r| r[col("point")] == p.to_string()).collect();
            let m = |c: &str| pts.iter().map(|r| r[col(c)].parse::<f64>().unwrap()).sum::<f64>() / pts.len() as f64;
            (p, m("val_accuracy"), m("val_nll"))
        })
        .collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
    let best = means[0].0;
    for r in &rows {
        let selected = r[col("selected")] == "1";
        assert_eq!(selected, r[col("point")] == best.to_string());
    }

    // A grid point reproduces the standalone run with the same settings.
    let single = write(tmp.path(), "single.json", &SMALL.replace("\"lr\": 0.05", "\"lr\": 0.05, \"weight_decay\": 0.01"));
    let single_out = tmp.path().join("single");
    assert_eq!(run(&["--config", s(&single), "--out", s(&single_out), "train"]), 0);
    let a = CalibrationReport::from_json(&std::fs::read_to_string(out.join("point2/report.json")).unwrap()).unwrap();
    let b = CalibrationReport::from_json(&std::fs::read_to_string(single_out.join("report.json")).unwrap()).unwrap();
    assert_eq!(a.runs, b.runs);
}

#[test]
fn calibrate_and_report_from_saved_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", SMALL);
    let out = tmp.path().join("t");
    assert_eq!(run(&["--config", s(&cfg), "--out", s(&out), "train"]), 0);
    let data = tmp.path().join("d");
    let gen = ["--seed", "2", "--out", s(&data), "gen-data", "blobs", "--k", "3", "--n", "400", "--d", "4", "--spread", "0.3"];
    assert_eq!(run(&gen), 0);

    let cal = tmp.path().join("c");
    let model = out.join("run0/model.json");
    let data_csv = data.join("dataset.csv");
    let args = ["--out", s(&cal), "calibrate", "--model", s(&model), "--data", s(&data_csv), "--split-half"];
    assert_eq!(run(&args), 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cal.join("calibration.json")).unwrap()).unwrap();
    let dirs = v["directions"].as_array().unwrap();
    assert_eq!(dirs.len(), 2);
    for d in dirs {
        assert_eq!(d["tau"], d["fit"]["tau"]);
        assert_eq!(d["before"]["accuracy"], d["after"]["accuracy"]);
    }

    let rep = tmp.path().join("r");
    let log = out.join("run0/predictions.csv");
    assert_eq!(run(&["--out", s(&rep), "--bins", "10", "report", "--log", s(&log)]), 0);
    let rel = std::fs::read_to_string(rep.join("reliability.csv")).unwrap();
    assert_eq!(rel.lines().count(), 2 + 10);
    let ent = std::fs::read_to_string(rep.join("entropy_histogram.csv")).unwrap();
    assert!(ent.lines().any(|l| l.contains(",ood,")));

    // Mismatched model and data dimensions are a validation error.
    let other = tmp.path().join("o");
    assert_eq!(run(&["--out", s(&other), "gen-data", "blobs", "--k", "3", "--n", "50", "--d", "2"]), 0);
    let other_csv = other.join("dataset.csv");
    assert_eq!(run(&["--out", s(&cal), "calibrate", "--model", s(&model), "--data", s(&other_csv)]), EXIT_INVALID);
}
