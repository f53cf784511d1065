//! End-to-end runs of the `ciosl` binary.

use std::path::Path;
use std::process::{Command, Output};

use ciosl::results::{read_results, ResultLine};

fn ciosl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ciosl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn small_dataset(dir: &Path) {
    let out = ciosl(
        &[
            "gen-synthetic", "--classes", "4", "--instances", "2", "--frames", "24", "--dim", "8",
            "--spread", "0.3", "--seed", "5", "--out", "data.bin",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
}

const CONFIG: &str = r#"
dataset = "data.bin"
output = "results.jsonl"
learners = ["finetune", "ciosl"]

[ordering]
kind = "class-iid"

[hyper]
hidden_dims = [16, 16]
buffer_capacity = 30
base_epochs = 5
offline_epochs = 5
"#;

fn summaries(path: &Path) -> usize {
    read_results(path)
        .unwrap()
        .iter()
        .filter(|l| matches!(l, ResultLine::Summary(_)))
        .count()
}

#[test]
fn generate_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();

    let out = ciosl(&["run", "--config", "exp.toml", "--seeds", "3", "--jobs", "2"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("CIOSL") && stdout.contains("Fine-Tune"), "{stdout}");

    let results = dir.path().join("results.jsonl");
    assert_eq!(summaries(&results), 1);
    let runs = read_results(&results)
        .unwrap()
        .into_iter()
        .filter(|l| matches!(l, ResultLine::Run(_)))
        .count();
    assert_eq!(runs, 3 * 2);
    assert!(!dir.path().join("results.jsonl.partial").exists());

    let out = ciosl(&["report", "results.jsonl"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("Offline"));
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    let out = ciosl(
        &[
            "run", "--config", "exp.toml", "--seeds", "4,9", "--learners", "ciosl", "--policy",
            "lawcbr", "--sampling", "lapn", "--capacity", "12", "--out", "other.jsonl",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let lines = read_results(&dir.path().join("other.jsonl")).unwrap();
    let ResultLine::Header { config, partial, .. } = &lines[0] else {
        panic!("first line is not a header");
    };
    assert!(!partial);
    assert_eq!(config.seeds, vec![4, 9]);
    assert_eq!(config.hyper.buffer_capacity, 12);
    for line in &lines {
        if let ResultLine::Run(r) = line {
            let buffer = r.buffer.as_ref().expect("ciosl keeps a buffer");
            assert!(buffer.len <= 12);
        }
    }
    assert!(!dir.path().join("results.jsonl").exists());
}

#[test]
fn instance_ordering_without_instances_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("flat.csv"),
        "label,a,b\n0,0.1,0.2\n0,0.2,0.1\n1,0.9,1.0\n1,1.0,0.9\n0,0.15,0.1\n1,0.95,0.9\n",
    )
    .unwrap();
    let out = ciosl(&["import-csv", "--input", "flat.csv", "--out", "flat.bin"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("6 records"));

    let out = ciosl(
        &["run", "--dataset", "flat.bin", "--ordering", "class-instance", "--out", "r.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).starts_with("error:"), "{}", text(&out.stderr));
    assert!(!dir.path().join("r.jsonl").exists());
    assert!(!dir.path().join("r.jsonl.partial").exists());
}

#[test]
fn usage_and_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = ciosl(&["run", "--seeds", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = ciosl(&["run", "--dataset", "missing.bin"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(dir.path().join("junk.bin"), b"not a dataset").unwrap();
    let out = ciosl(&["run", "--dataset", "junk.bin"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = ciosl(&["report", "missing.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
