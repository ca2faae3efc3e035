mod common;

use std::path::Path;
use std::process::{Command, Output};

use shuffle_histo::config::ExperimentConfig;
use shuffle_histo::data::Magnification;
use shuffle_histo::metrics::MetricsReport;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shuffle-histo"));
    c.env_remove("SHUFFLE_HISTO_DATA").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["scan", "--root", "/tmp", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in [
        "scan", "synth", "split", "train", "eval", "bench", "sweep-m", "report",
    ] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}

#[test]
fn eval_without_checkpoint_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--root", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn scanning_a_missing_root_fails_with_exit_1() {
    let o = run(&["scan", "--root", "/nonexistent/shuffle-histo"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/shuffle-histo"));
}

#[test]
fn synth_then_scan_reports_totals() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let o = run(&[
        "--seed",
        "3",
        "synth",
        "--out",
        p(&root),
        "--n-per-class",
        "6",
        "--magnifications",
        "40,400",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = bin()
        .args(["scan"])
        .env("SHUFFLE_HISTO_DATA", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.trim_end().lines().last().unwrap(), "total 12 12 24");

    let o = run(&["scan", "--root", p(&root), "--format", "csv"]);
    let csv = stdout(&o);
    assert!(csv.starts_with("magnification,benign,malignant,total\n"));
    assert!(csv.contains("\n40,6,6,12\n") && csv.contains("\n100,0,0,0\n"));
}

fn desk_config(path: &Path) {
    let mut cfg = ExperimentConfig {
        model: common::desk_model_config(),
        train: common::desk_train_config(5),
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.random_backbone = true;
    cfg.save_json(path).unwrap();
}

#[test]
fn synth_train_eval_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let config = dir.path().join("config.json");
    desk_config(&config);
    let o = run(&[
        "synth",
        "--out",
        p(&root),
        "--n-per-class",
        "20",
        "--magnifications",
        "40,100,200,400",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut runs = Vec::new();
    for mag in Magnification::ALL {
        let run_dir = dir.path().join(format!("run{}", mag.value()));
        let mag_arg = mag.value().to_string();
        let o = run(&[
            "--config",
            p(&config),
            "train",
            "--root",
            p(&root),
            "--run-dir",
            p(&run_dir),
            "--magnification",
            &mag_arg,
        ]);
        assert!(o.status.success(), "train {mag}: {}", stderr(&o));
        assert!(stdout(&o).starts_with("best epoch"));

        let o = run(&[
            "eval",
            "--checkpoint",
            p(&run_dir.join("best")),
            "--root",
            p(&root),
            "--run-dir",
            p(&run_dir),
            "--format",
            "json",
        ]);
        assert!(o.status.success(), "eval {mag}: {}", stderr(&o));
        let printed: MetricsReport = serde_json::from_str(&stdout(&o)).unwrap();
        let stored: MetricsReport = serde_json::from_str(
            &std::fs::read_to_string(run_dir.join("test_metrics.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(printed, stored);
        assert_eq!(stored.magnification, mag);
        runs.push(run_dir);
    }

    let baselines = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/baseline_results.csv");
    let report = |out: &Path| {
        let mut args = vec!["report".to_string(), "--runs".into()];
        args.extend(runs.iter().map(|r| p(r).to_string()));
        args.extend([
            "--baselines".into(),
            p(&baselines).into(),
            "--out-dir".into(),
            p(out).into(),
        ]);
        bin().args(&args).output().unwrap()
    };
    let out = dir.path().join("report");
    let first = report(&out);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("Our method"));
    let names = [
        "magnification_table.txt",
        "magnification_table.csv",
        "magnification_table.json",
        "comparison.txt",
        "comparison.csv",
        "comparison.json",
        "metrics_by_magnification.svg",
        "training_40.svg",
        "training_400.svg",
    ];
    let snapshot = || -> Vec<String> {
        names
            .iter()
            .map(|n| std::fs::read_to_string(out.join(n)).unwrap())
            .collect()
    };
    let before = snapshot();
    let second = report(&out);
    assert!(second.status.success());
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(before, snapshot());

    let o = run(&["report", "--runs", p(&runs[0]), p(&runs[1])]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("200X"), "{}", stderr(&o));
}
