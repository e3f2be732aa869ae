use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn petalnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_petalnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn assert_error(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(parsed["error"], kind);
}

const TINY: &str = r#"
output_dir = "run"

[data]
num_classes = 4
samples_per_class = 20
image_side = 12

[train]
epochs = 2
batch_size = 16
replicas = 2

[[bases]]
name = "small"
conv_filters = [4]
feature_dim = 8
seed = 1

[[bases]]
name = "wide"
conv_filters = [6, 8]
feature_dim = 8
seed = 2
"#;

#[test]
fn lr_preview_follows_the_default_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&petalnet(&["lr-preview", "--steps", "12"], dir.path()));
    let rows: Vec<(u32, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (s, r) = l.split_once(',').unwrap();
            (s.parse().unwrap(), r.parse().unwrap())
        })
        .collect();
    assert_eq!(text.lines().next(), Some("step,rate"));
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0], (0, 1.0e-5));
    for row in &rows[4..8] {
        assert_eq!(row.1, 4.0e-4);
    }
    assert_eq!(rows[9].1, (4e-4 - 1e-5) * 0.8 + 1e-5);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        stdout(&petalnet(&["gen-data", "--seed", "7", "--out", out], dir.path()));
    }
    for file in ["dataset.dfl", "manifest.json"] {
        assert_eq!(digest(&dir.path().join("a").join(file)), digest(&dir.path().join("b").join(file)));
    }
    stdout(&petalnet(&["gen-data", "--seed", "8", "--out", "c"], dir.path()));
    assert_ne!(
        digest(&dir.path().join("a/dataset.dfl")),
        digest(&dir.path().join("c/dataset.dfl"))
    );
}

#[test]
fn fuse_average_of_opposite_one_hot_rows() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.csv"), "p0,p1\n1,0\n").unwrap();
    std::fs::write(dir.path().join("b.csv"), "0,1\n").unwrap();
    let text = stdout(&petalnet(
        &["fuse", "--strategy", "average", "--input", "a.csv", "b.csv"],
        dir.path(),
    ));
    assert_eq!(text, "p0,p1,label\n0.5,0.5,0\n");
}

#[test]
fn fuse_accuracy_weighting() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.csv"), "0.9,0.1\n").unwrap();
    std::fs::write(dir.path().join("b.csv"), "0.2,0.8\n").unwrap();
    stdout(&petalnet(
        &["fuse", "--strategy", "accuracy", "--accuracies", "0.75,0.25", "--input", "a.csv", "b.csv", "--out", "f.csv"],
        dir.path(),
    ));
    let text = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[0] - 0.725).abs() < 1e-12 && (row[1] - 0.275).abs() < 1e-12);
    assert_eq!(row[2], 0.0);
}

#[test]
fn errors_are_single_json_lines_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepochz = 1\n").unwrap();
    assert_error(&petalnet(&["--config", "bad.toml", "lr-preview"], dir.path()), 2, "config");
    std::fs::write(dir.path().join("div.toml"), "[train]\nbatch_size = 10\nreplicas = 3\n").unwrap();
    assert_error(&petalnet(&["--config", "div.toml", "lr-preview"], dir.path()), 2, "config");
    assert_error(&petalnet(&["train-base", "--data", "missing"], dir.path()), 3, "data");
    assert_error(&petalnet(&["fuse", "--strategy", "median", "--input", "x.csv"], dir.path()), 2, "config");
    std::fs::write(dir.path().join("p.csv"), "0.7,0.7\n").unwrap();
    assert_error(&petalnet(&["fuse", "--input", "p.csv"], dir.path()), 3, "data");
    assert_error(&petalnet(&["no-such-command"], dir.path()), 2, "config");
}

#[test]
fn dumped_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let first = stdout(&petalnet(&["--config", "tiny.toml", "--dump-config"], dir.path()));
    std::fs::write(dir.path().join("dump.toml"), &first).unwrap();
    let second = stdout(&petalnet(&["--config", "dump.toml", "--dump-config"], dir.path()));
    assert_eq!(first, second);
    assert!(first.contains("name = \"wide\""));
}

fn pipeline(root: &Path) -> Vec<Vec<u8>> {
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml"];
    let run = |args: &[&str]| stdout(&petalnet(&[&cfg[..], args].concat(), root));
    run(&["gen-data"]);
    run(&["train-base"]);
    run(&["train-meta"]);
    let metrics: serde_json::Value = serde_json::from_str(&run(&["eval", "--model", "run/meta/meta.json"])).unwrap();
    assert_eq!(metrics["confusion"].as_array().unwrap().len(), 4);
    let base: serde_json::Value =
        serde_json::from_str(&run(&["eval", "--model", "run/bases/small.dfl", "--split", "val"])).unwrap();
    assert!(base["macro_f1"].as_f64().unwrap() >= 0.0);
    let report = run(&["report"]);
    let models: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, ["small", "wide", "fusion_average", "meta"]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
    [
        "run/bases/small.dfl",
        "run/bases/wide.dfl",
        "run/bases/small_history.csv",
        "run/bases/wide_history.csv",
        "run/meta/head.dfl",
        "run/meta/history.csv",
        "run/report.csv",
    ]
    .iter()
    .map(|p| digest(&root.join(p)))
    .collect()
}

#[test]
fn end_to_end_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(pipeline(a.path()), pipeline(b.path()));
    assert!(!a.path().join("run/meta/head.dfl.tmp").exists());
    let config = std::fs::read_to_string(a.path().join("run/config.toml")).unwrap();
    assert!(config.contains("epochs = 2"));
}

#[test]
fn meta_needs_two_bases() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml"];
    stdout(&petalnet(&[&cfg[..], &["gen-data"]].concat(), dir.path()));
    stdout(&petalnet(&[&cfg[..], &["train-base", "--base", "small"]].concat(), dir.path()));
    assert_error(
        &petalnet(&[&cfg[..], &["train-meta", "--base", "small"]].concat(), dir.path()),
        3,
        "data",
    );
}
