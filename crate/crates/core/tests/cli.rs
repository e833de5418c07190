use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
num_classes = 3
samples_per_split = [24, 9, 9]
seq_lens = [4, 4, 4]
feature_dims = [3, 2, 2]
latent_dim = 4

[net]
d = 8
num_heads = 2
num_layers = 1
ffn_dim = 16
num_classes = 3
input_dims = [3, 2, 2]

[train]
batch_size = 8
epochs = 2
statnet_hidden = 8

[eval]
seeds = [0, 1]
"#;

fn corrkd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrkd"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = corrkd(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut found = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                found.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    found
}

#[test]
fn check_losses_passes_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["check-losses"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.contains("PASS") || l.contains("FAIL"))
        .collect();
    assert!(rows.len() > 20, "{text}");
    assert!(rows.iter().all(|l| l.contains("PASS")), "{text}");
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["check-losses", "--bogus"][..], &["frobnicate"][..]] {
        let out = corrkd(dir.path(), args);
        assert_eq!(out.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
    assert_eq!(corrkd(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_without_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    ok(dir.path(), &["generate-data", "--config", "c.toml", "--out", "d"]);
    let out = corrkd(dir.path(), &["sweep", "--config", "c.toml", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("student.json"), "{err}");
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    fs::write(dir.path().join("b.toml"), "[train]\nepochs = 0\n").unwrap();
    fs::write(dir.path().join("c.toml"), "[train\n").unwrap();
    for c in ["a.toml", "b.toml", "c.toml", "missing.toml"] {
        let out = corrkd(dir.path(), &["generate-data", "--config", c, "--out", "d"]);
        assert_eq!(
            out.status.code(),
            Some(1),
            "{c}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = corrkd(dir.path(), &["generate-data", "--preset", "nope", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    ok(
        dir.path(),
        &["generate-data", "--config", "c.toml", "--seed", "7", "--out", "a"],
    );
    ok(
        dir.path(),
        &["generate-data", "--config", "c.toml", "--seed", "7", "--out", "b"],
    );
    let a = files(&dir.path().join("a/data"));
    assert_eq!(a.len(), 4);
    assert_eq!(a, files(&dir.path().join("b/data")));
    ok(
        dir.path(),
        &["generate-data", "--config", "c.toml", "--seed", "8", "--out", "c"],
    );
    assert_ne!(a, files(&dir.path().join("c/data")));
}

fn pipeline(root: &Path, out: &str) {
    let run = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend(["--config", "c.toml", "--out", out, "--jobs", "1"]);
        ok(root, &v)
    };
    run(&["generate-data"]);
    run(&["train-teacher"]);
    run(&["train-student"]);
    run(&["train-student", "--baseline", "--name", "base"]);
    run(&["evaluate", "--available", "la", "--p", "0.3"]);
    run(&["sweep"]);
    let report = run(&["report"]);
    assert!(String::from_utf8_lossy(&report.stdout).contains("Avg."));
}

#[test]
fn full_pipeline_is_deterministic_and_stays_inside_out() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("c.toml"), TINY).unwrap();
    pipeline(root, "one");
    pipeline(root, "two");

    let top: Vec<String> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let mut top = top;
    top.sort();
    assert_eq!(top, ["c.toml", "one", "two"]);

    let (a, b) = (files(&root.join("one")), files(&root.join("two")));
    for name in [
        "data/train.jsonl",
        "teacher.json",
        "student.json",
        "base.json",
        "teacher_metrics.csv",
        "student_metrics.csv",
        "evaluate.csv",
        "report.csv",
        "curve.csv",
        "run-sweep.toml",
    ] {
        let key = PathBuf::from(name);
        assert!(a.contains_key(&key), "missing {name}");
        assert_eq!(a[&key], b[&key], "{name} differs between identical runs");
    }
    let report = String::from_utf8(a[&PathBuf::from("report.csv")].clone()).unwrap();
    assert_eq!(report.lines().count(), 1 + 17 * 2 + 2);
    assert_eq!(
        String::from_utf8_lossy(&a[&PathBuf::from("curve.csv")]).lines().count(),
        11
    );

    // The resolved config reproduces the run.
    fs::copy(root.join("one/run-train-teacher.toml"), root.join("r.toml")).unwrap();
    ok(
        root,
        &[
            "train-teacher",
            "--config",
            "r.toml",
            "--out",
            "three",
            "--data",
            "one/data",
        ],
    );
    assert_eq!(
        fs::read(root.join("three/teacher.json")).unwrap(),
        a[&PathBuf::from("teacher.json")]
    );
}

#[test]
fn resume_continues_a_finished_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("c.toml"), TINY).unwrap();
    let base = ["--config", "c.toml", "--out", "x"];
    ok(root, &[&["generate-data"][..], &base].concat());
    ok(root, &[&["train-teacher", "--epochs", "1"][..], &base].concat());
    ok(root, &[&["train-teacher", "--resume"][..], &base].concat());
    let resumed = fs::read(root.join("x/teacher.json")).unwrap();
    ok(root, &[&["train-teacher"][..], &base].concat());
    assert_eq!(resumed, fs::read(root.join("x/teacher.json")).unwrap());
}
