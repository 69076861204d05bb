//! End-to-end runs of the `gridverify` binary on the shipped fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(rel)
        .display()
        .to_string()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridverify"))
        .args(args)
        .env_remove("GRIDVERIFY_SEED")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn simulate(dir: &Path, name: &str, t: &str, seed: &str, stats: &str) -> PathBuf {
    let v = dir.join(name);
    let grid = fixture("feeder8/grid.csv");
    let status = fixture("feeder8/status.csv");
    let out = run(&[
        "simulate",
        "--grid",
        &grid,
        "--stats",
        stats,
        "--status",
        &status,
        "-t",
        t,
        "--seed",
        seed,
        "--voltages",
        v.to_str().unwrap(),
        "--no-timestamp",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    v
}

#[test]
fn simulate_is_deterministic_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let stats = fixture("feeder8/stats.json");
    let a = simulate(dir.path(), "a.csv", "50", "9", &stats);
    let b = simulate(dir.path(), "b.csv", "50", "9", &stats);
    let c = simulate(dir.path(), "c.csv", "50", "10", &stats);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 1 + 51);

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["b_true"]["L0"], 1.0);
    assert_eq!(manifest["b_true"]["L9"], 0.0);
    assert_eq!(manifest["stats_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest.get("timestamp_unix").is_none());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("v.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_gridverify"))
        .args([
            "simulate",
            "--grid",
            &fixture("feeder8/grid.csv"),
            "--stats",
            &fixture("feeder8/stats.json"),
        ])
        .args([
            "--status",
            &fixture("feeder8/status.csv"),
            "-t",
            "5",
            "--voltages",
            v.to_str().unwrap(),
        ])
        .env("GRIDVERIFY_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json(&out)["seed"], 77);
}

#[test]
fn zero_variance_stats_give_flat_voltages() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("zero.json");
    fs::write(
        &stats,
        r#"{"sigma_p": [0,0,0,0,0,0,0], "sigma_q": [0,0,0,0,0,0,0], "noise_variance": 0}"#,
    )
    .unwrap();
    let v = simulate(dir.path(), "v.csv", "20", "1", stats.to_str().unwrap());
    let text = fs::read_to_string(v).unwrap();
    for line in text.lines().skip(1) {
        assert!(line.split(',').all(|x| x.parse::<f64>().unwrap() == 1.0), "{line}");
    }
}

#[test]
fn missing_stats_file_is_an_input_error_naming_the_path() {
    let out = run(&[
        "verify",
        "--grid",
        &fixture("feeder8/grid.csv"),
        "--stats",
        "/does/not/exist.json",
        "--voltages",
        "/x.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let report = json(&out);
    assert_eq!(report["status"], "error");
    assert_eq!(report["code"], "io_error");
    assert!(report["message"].as_str().unwrap().contains("/does/not/exist.json"));
}

#[test]
fn malformed_flags_are_input_errors() {
    let out = run(&["verify", "--grid"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["code"], "usage");
}

#[test]
fn verify_recovers_the_fixture_and_validates_flags() {
    let dir = tempfile::tempdir().unwrap();
    let v = simulate(dir.path(), "v.csv", "500", "42", &fixture("feeder8/stats.json"));
    let base = [
        "verify".to_string(),
        "--grid".into(),
        fixture("feeder8/grid.csv"),
        "--stats".into(),
        fixture("feeder8/stats.json"),
        "--voltages".into(),
        v.display().to_string(),
    ];
    let with = |extra: &[&str]| {
        let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
        args.extend_from_slice(extra);
        run(&args)
    };

    let table = dir.path().join("t.csv");
    let out = with(&[
        "--truth",
        &fixture("feeder8/status.csv"),
        "--table",
        table.to_str().unwrap(),
        "--no-timestamp",
    ]);
    assert!(out.status.success());
    let report = json(&out);
    assert_eq!(report["metrics"]["line_errors"], 0);
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 11);
    assert_eq!(
        out.stdout,
        with(&["--truth", &fixture("feeder8/status.csv"), "--no-timestamp"]).stdout
    );

    let objective = |solver: &str| {
        let out = with(&[
            "--model",
            "simplified",
            "--solver",
            solver,
            "--tol",
            "1e-9",
            "--max-iters",
            "20000",
        ]);
        assert!(out.status.success());
        json(&out)["objective_relaxed"].as_f64().unwrap()
    };
    let (fw, pgd) = (objective("fw"), objective("pgd"));
    assert!((fw - pgd).abs() <= 1e-4 * pgd.abs(), "fw {fw} pgd {pgd}");

    assert_eq!(with(&["--L", "11"]).status.code(), Some(2));
    assert_eq!(with(&["--solver", "fw"]).status.code(), Some(2));
}

#[test]
fn verify_map_honours_hard_priors_and_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let v = simulate(dir.path(), "v.csv", "200", "3", &fixture("feeder8/stats.json"));
    let priors = dir.path().join("prior.csv");
    fs::write(&priors, "line_id,prior\nL0,1\nL8,1\n").unwrap();
    let args = |thr: &str| {
        run(&[
            "verify-map",
            "--grid",
            &fixture("feeder8/grid.csv"),
            "--stats",
            &fixture("feeder8/stats.json"),
            "--voltages",
            v.to_str().unwrap(),
            "--priors",
            priors.to_str().unwrap(),
            "--threshold",
            thr,
        ])
    };
    let out = args("0.5");
    assert!(out.status.success());
    let report = json(&out);
    assert_eq!(report["b_hat"]["L0"], 1.0);
    assert_eq!(report["b_hat"]["L8"], 1.0);

    let all = json(&args("0"));
    assert!(all["b_hat"].as_object().unwrap().values().all(|v| v == 1.0));
}

#[test]
fn montecarlo_writes_tables_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str, jobs: &str| {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "montecarlo",
            "--grid",
            &fixture("feeder8/grid.csv"),
            "--stats",
            &fixture("feeder8/stats.json"),
            "--runs",
            "2",
            "--samples",
            "20,100",
            "--schemes",
            "ml_detailed,map,random",
            "--seed",
            "4",
            "--jobs",
            jobs,
            "--output-dir",
            out_dir.to_str().unwrap(),
            "--no-timestamp",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let a = go("a", "1");
    let b = go("b", "2");
    for file in ["records.csv", "summary.csv", "roc.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let records = fs::read_to_string(a.join("records.csv")).unwrap();
    assert!(records.starts_with("run,scheme,T,line_errors,error_probability,tpr,fpr,runtime_ms"));
    assert_eq!(records.lines().count(), 1 + 2 * 2 * 3);
}

#[test]
fn baselines_report_both_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let v = simulate(dir.path(), "v.csv", "300", "5", &fixture("feeder8/stats.json"));
    let out = run(&[
        "baselines",
        "--grid",
        &fixture("feeder8/grid.csv"),
        "--stats",
        &fixture("feeder8/stats.json"),
        "--voltages",
        v.to_str().unwrap(),
        "--truth",
        &fixture("feeder8/status.csv"),
    ]);
    assert!(out.status.success());
    let report = json(&out);
    for scheme in ["random", "inverse_covariance"] {
        let b = report[scheme]["b_hat"].as_object().unwrap();
        assert_eq!(b.values().filter(|v| *v == 1.0).count(), 7);
        assert!(report[scheme]["metrics"]["error_probability"].is_number());
    }
}
