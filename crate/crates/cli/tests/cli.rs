use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn icl_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-lab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
    "dataset": {"synth": {"num_labels": 4, "train_size": 100, "test_size": 12, "seed": 1}},
    "strategies": [{"kind": "random_prefix"}],
    "k_list": [1, 8],
    "seeds": [0]
}"#;

#[test]
fn run_writes_csv_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = icl_lab(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("dataset,strategy,ordering,k,"));
    assert_eq!(stdout.lines().count(), 3);
}

#[test]
fn run_writes_json_into_new_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let target = dir.path().join("results/out.json");
    let out = icl_lab(&["run", "--config", &cfg, "--out", target.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&target).unwrap();
    assert!(text.trim_start().starts_with('['));
    assert!(text.contains("\"records\""));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"dataset": {"synth": {"num_labels": 4, "train_size": 10, "test_size": 2, "seed": 0}}, "strategies": [{"kind": "random_prefix"}], "k_list": [5, 1]}"#);
    let out = icl_lab(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ascending"));
    let missing = icl_lab(&["run", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(missing.status.code(), Some(2));
    let zero = icl_lab(&["run", "--config", &write_config(dir.path(), SMALL), "--workers", "0"]);
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn decoding_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("multi.jsonl");
    let lines: Vec<String> = (0..30)
        .map(|i| {
            let label = ["new york", "new jersey", "old york"][i % 3];
            let split = if i < 24 { "train" } else { "test" };
            format!(r#"{{"input": "word{} thing", "label": "{label}", "split": "{split}"}}"#, i % 5)
        })
        .collect();
    fs::write(&data, lines.join("\n")).unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{"dataset": {{"path": {:?}}}, "strategies": [{{"kind": "random_prefix"}}], "k_list": [0, 2], "seeds": [0], "boost": 1e-6}}"#, data),
    );
    let out = icl_lab(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k=0"));
}

#[test]
fn needle_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dataset": {"synth": {"num_labels": 32, "train_size": 200, "test_size": 60, "seed": 0}},
            "strategies": [{"kind": "random_prefix"}], "k_list": [10, 60], "seeds": [0]}"#,
    );
    let out = icl_lab(&["needle", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    for row in stdout.lines().skip(1) {
        let acc: f64 = row.split(',').nth(9).unwrap().parse().unwrap();
        assert_eq!(acc, 1.0, "{row}");
    }
}

#[test]
fn stats_reports_dataset_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.jsonl");
    fs::write(
        &data,
        "{\"input\": \"a b c\", \"label\": \"x\"}\n{\"input\": \"d e\", \"label\": \"y\"}\n{\"input\": \"f\", \"label\": \"x\", \"split\": \"test\"}\n",
    )
    .unwrap();
    let out = icl_lab(&["stats", "--data", data.to_str().unwrap(), "--template", "generic"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], "tiny");
    assert_eq!(row[2], "2");
    assert_eq!(row[3], "2");
    let bad = icl_lab(&["stats", "--data", data.to_str().unwrap(), "--template", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn weights_build_writes_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let out = icl_lab(&["weights", "build-induction", "--vocab", "12", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let bytes = fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"ICLLABW\0"));
    let zero = icl_lab(&["weights", "build-induction", "--vocab", "0", "--out", path.to_str().unwrap()]);
    assert_eq!(zero.status.code(), Some(2));
}
