use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");

fn incidental(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incidental"))
        .args(args)
        .env_remove("INCIDENTAL_THREADS")
        .output()
        .unwrap()
}

fn write_csv(dir: &Path, n: usize, collinear: bool) -> PathBuf {
    let mut text = String::from("y,x1,x2\n");
    for i in 0..n {
        let x1 = ((i * 37) % 23) as f64 / 5.0 - 2.0;
        let x2 = if collinear {
            2.0 * x1
        } else {
            ((i * 11) % 17) as f64 / 4.0 - 2.0
        };
        let noise = ((i * 7919) % 101) as f64 / 50.0 - 1.0;
        let outlier = if i % 10 == 0 { 15.0 } else { 0.0 };
        text.push_str(&format!("{},{x1},{x2}\n", x1 + x2 + noise + outlier));
    }
    let path = dir.join("data.csv");
    fs::write(&path, text).unwrap();
    path
}

fn run_record(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_writes_all_artifacts() {
    let tmp = TempDir::new().unwrap();
    let csv = write_csv(tmp.path(), 80, false);
    let out = tmp.path().join("fit");
    let res = incidental(&["fit", s(&csv), "--penalty", "soft", "--lambda", "2.5", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["coefficients.tsv", "incidental.tsv", "summary.json", "run.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let coef = fs::read_to_string(out.join("coefficients.tsv")).unwrap();
    assert_eq!(coef.lines().count(), 3);
    let mu = fs::read_to_string(out.join("incidental.tsv")).unwrap();
    assert!(mu.lines().count() > 1, "the planted outliers should be flagged");
    assert_eq!(run_record(&out)["status"], "ok");
}

#[test]
fn fit_with_data_driven_lambda() {
    let tmp = TempDir::new().unwrap();
    let csv = write_csv(tmp.path(), 120, false);
    let out = tmp.path().join("fit");
    let res = incidental(&[
        "fit",
        s(&csv),
        "--penalty",
        "hard",
        "--rule",
        "ci",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema"], "incidental.report.v1");
}

#[test]
fn invalid_input_exits_with_usage_code() {
    let tmp = TempDir::new().unwrap();
    let csv = write_csv(tmp.path(), 40, false);
    let out = tmp.path().join("neg");
    let res = incidental(&["fit", s(&csv), "--lambda", "-1", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let record = run_record(&out);
    assert_eq!(record["status"], "error");
    assert!(record["error"].as_str().unwrap().contains("lambda"));

    assert_eq!(incidental(&["fit", s(&csv), "--bogus"]).status.code(), Some(2));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "y,x\n1,2\n3,oops\n").unwrap();
    let res = incidental(&["fit", s(&bad), "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 3"));

    let missing = tmp.path().join("missing.csv");
    assert_eq!(
        incidental(&["fit", s(&missing), "--out", s(&tmp.path().join("m"))])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn collinear_design_exits_with_numerical_code() {
    let tmp = TempDir::new().unwrap();
    let csv = write_csv(tmp.path(), 40, true);
    let out = tmp.path().join("col");
    let res = incidental(&["fit", s(&csv), "--lambda", "2", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(run_record(&out)["status"], "error");
}

#[test]
fn smoke_experiments_run() {
    let tmp = TempDir::new().unwrap();
    for (suite, file) in [
        ("rmse", "rmse.tsv"),
        ("coverage", "coverage.tsv"),
        ("qq", "qq_beta_tilde_1.tsv"),
        ("selection", "summary.json"),
    ] {
        let out = tmp.path().join(suite);
        let res = incidental(&["experiment", suite, "--config", SMOKE, "--reps", "10", "--out", s(&out)]);
        assert!(
            res.status.success(),
            "{suite}: {}",
            String::from_utf8_lossy(&res.stderr)
        );
        assert!(out.join(file).exists(), "{suite}");
        assert_eq!(run_record(&out)["status"], "ok");
    }
}

#[test]
fn experiment_without_required_section_fails() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bare.toml");
    let text = fs::read_to_string(SMOKE).unwrap();
    fs::write(&cfg, text.split("[coverage]").next().unwrap()).unwrap();
    let out = tmp.path().join("qq");
    let res = incidental(&["experiment", "qq", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(run_record(&out)["status"], "error");
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let tmp = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        let res = Command::new(env!("CARGO_BIN_EXE_incidental"))
            .args(["experiment", "rmse", "--config", SMOKE, "--out", s(&out)])
            .env("INCIDENTAL_THREADS", threads)
            .output()
            .unwrap();
        assert!(res.status.success());
        outputs.push((
            fs::read(out.join("rmse.tsv")).unwrap(),
            fs::read(out.join("summary.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn select_lambda_reports_a_value() {
    let tmp = TempDir::new().unwrap();
    let csv = write_csv(tmp.path(), 120, false);
    let out = tmp.path().join("sel");
    let res = incidental(&["select-lambda", s(&csv), "--seed", "1", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("lambda_curve.tsv").exists());
    assert!(!res.stdout.is_empty());
}
