use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seiznet::data::{synthetic_samples, write_csv};

fn seiznet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seiznet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, per_class: usize) -> PathBuf {
    let path = dir.join("eeg.csv");
    write_csv(&path, &synthetic_samples(per_class, 5)).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_lenet(data: &Path, out: &Path, task: &str) -> Output {
    seiznet(&[
        "train",
        "--data",
        s(data),
        "--task",
        task,
        "--arch",
        "lenet1d",
        "--epochs",
        "3",
        "--batch",
        "16",
        "--seed",
        "4",
        "--out",
        s(out),
    ])
}

#[test]
fn missing_data_file_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("absent.csv");
    for cmd in ["prepare", "train"] {
        let o = seiznet(&[cmd, "--data", s(&missing), "--task", "1", "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(!out.exists());
    }
}

#[test]
fn malformed_row_is_reported_by_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2);
    let mut text = std::fs::read_to_string(&data).unwrap();
    text.push_str("bad,1,2,3\n");
    std::fs::write(&data, text).unwrap();
    let o = seiznet(&[
        "prepare",
        "--data",
        s(&data),
        "--task",
        "4",
        "--out",
        s(&dir.path().join("p")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 12"), "{err}");
}

#[test]
fn prepare_writes_stratified_splits() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 100);
    let out = dir.path().join("prep");
    let o = seiznet(&[
        "prepare",
        "--data",
        s(&data),
        "--task",
        "1",
        "--seed",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = |f: &str| std::fs::read_to_string(out.join(f)).unwrap().lines().count() - 1;
    // 300 samples after excluding C and D: 76/12/12 per raw label
    assert_eq!((rows("train.csv"), rows("val.csv"), rows("test.csv")), (228, 36, 36));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(
        manifest["results"]["splits"]["train"]["class_counts"],
        serde_json::json!([152, 76])
    );
    assert_eq!(manifest["data_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn train_then_eval_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 40);
    let run = dir.path().join("run");
    let o = train_lenet(&data, &run, "3");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("accuracy train "));
    for f in [
        "checkpoint.bin",
        "history.csv",
        "metrics_task3.json",
        "confusion_task3.csv",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 5);

    let ck = seiznet::persistence::load_checkpoint(run.join("checkpoint.bin")).unwrap();
    let eval_dir = dir.path().join("eval");
    let eval = |out: &Path| {
        seiznet(&[
            "eval",
            "--checkpoint",
            s(&run.join("checkpoint.bin")),
            "--data",
            s(&data),
            "--split",
            "val",
            "--out",
            s(out),
        ])
    };
    let o = eval(&eval_dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics_task3.json")).unwrap()).unwrap();
    assert_eq!(metrics["accuracy"].as_f64().unwrap(), ck.meta.val_accuracy);

    // 40 per raw label: val gets 4 of each, so A+B, C+D, E
    let csv = std::fs::read_to_string(eval_dir.join("confusion_task3.csv")).unwrap();
    let sums: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').take(3).map(|c| c.parse::<u64>().unwrap()).sum())
        .collect();
    assert_eq!(sums, vec![8, 8, 4]);

    let again = dir.path().join("eval2");
    assert!(eval(&again).status.success());
    for f in ["metrics_task3.json", "confusion_task3.csv"] {
        assert_eq!(
            std::fs::read(eval_dir.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap()
        );
    }
}

#[test]
fn eval_refuses_task_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 20);
    let run = dir.path().join("run");
    assert!(train_lenet(&data, &run, "1").status.success());
    let o = seiznet(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--data",
        s(&data),
        "--task",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("task 1"));
}

#[test]
fn history_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 20);
    let run = dir.path().join("run");
    assert!(train_lenet(&data, &run, "2").status.success());
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,val_loss,val_acc,seconds");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0")));
}

#[test]
fn compare_tabulates_every_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 10);
    let out = dir.path().join("cmp");
    let o = seiznet(&[
        "compare",
        "--data",
        s(&data),
        "--task",
        "2",
        "--seeds",
        "1,2",
        "--epochs",
        "1",
        "--batch",
        "16",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = std::fs::read_to_string(out.join("compare_task2_runs.csv")).unwrap();
    for seed in ["1", "2"] {
        let archs: Vec<&str> = runs
            .lines()
            .filter(|l| l.starts_with(&format!("{seed},")))
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(archs, vec!["resnet26", "lenet1d", "alexnet1d"]);
    }
    let table = std::fs::read_to_string(out.join("compare_task2.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(1) == Some("2")));
}

#[test]
fn gradcheck_reports_eight_passing_lines() {
    let o = seiznet(&["gradcheck"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let checks: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .collect();
    assert_eq!(checks.len(), 8);
    assert!(checks.iter().all(|l| l.starts_with("PASS")));
}

#[test]
fn corrupted_conv_backward_is_caught() {
    let o = seiznet(&["gradcheck", "--corrupt-conv"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let fails: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(fails.len(), 1, "{text}");
    assert!(fails[0].contains("conv1d") && fails[0].contains("shape [2, 3, 8]") && fails[0].contains("worst"));
}
