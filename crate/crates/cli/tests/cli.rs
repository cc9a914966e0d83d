use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn smp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smp"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "off")
        .output()
        .expect("spawn smp")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = smp(args, cwd);
    assert!(
        out.status.success(),
        "smp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn scores(stdout: &str) -> (f64, f64) {
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    (v["src"].as_f64().unwrap(), v["mae"].as_f64().unwrap())
}

/// Small noiseless fixture with a fast model config.
const FAST: &str = r#"
k = 3
[synth]
n_users = 60
sigma = 0.0
[gbdt]
num_trees = 150
learning_rate = 0.1
min_samples_leaf = 5
[mlp]
hidden = [16]
epochs = 20
batch_size = 32
"#;

fn fixture(dir: &Path) {
    fs::write(dir.join("fast.toml"), FAST).unwrap();
    ok(&["synth", "--config", "fast.toml", "--out", "data"], dir);
}

/// The 60-user fixture is too small for a stable 0.99; 150 users clear it.
fn recovery_fixture(dir: &Path) {
    fs::write(
        dir.join("fast.toml"),
        FAST.replace("n_users = 60", "n_users = 150"),
    )
    .unwrap();
    ok(&["synth", "--config", "fast.toml", "--out", "data"], dir);
}

#[test]
fn evaluate_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "pid,value\n1,0.5\n2,3.0\n3,-1.0\n4,2.0\n";
    fs::write(dir.path().join("p.csv"), csv).unwrap();
    fs::write(dir.path().join("l.csv"), csv).unwrap();
    let (src, mae) = scores(&ok(
        &["evaluate", "--pred", "p.csv", "--labels", "l.csv"],
        dir.path(),
    ));
    assert_eq!(src, 1.0);
    assert_eq!(mae, 0.0);
}

#[test]
fn evaluate_aligns_by_pid() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.csv"), "pid,prediction\n3,1\n1,3\n2,2\n").unwrap();
    fs::write(dir.path().join("l.csv"), "pid,label\n1,3\n2,2\n3,1\n").unwrap();
    let out = ok(
        &[
            "evaluate", "--pred", "p.csv", "--labels", "l.csv", "--out", "s.json",
        ],
        dir.path(),
    );
    assert_eq!(scores(&out), (1.0, 0.0));
    assert!(dir.path().join("s.json.manifest.json").is_file());
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    fixture(a.path());
    fixture(b.path());
    for rel in [
        "train/posts.csv",
        "train/profiles.csv",
        "test/labels.csv",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(a.path().join("data").join(rel)).unwrap(),
            fs::read(b.path().join("data").join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn train_predict_evaluate_recovers_noiseless_signal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    recovery_fixture(d);
    ok(
        &[
            "train",
            "--config",
            "fast.toml",
            "--train",
            "data/train",
            "--test",
            "data/test",
            "--model",
            "gbdt",
            "--out",
            "run",
        ],
        d,
    );
    for f in [
        "fold0.smpm",
        "fold2.state.json",
        "predictions.csv",
        "folds.json",
        "manifest.json",
    ] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }
    ok(
        &[
            "predict",
            "--models-dir",
            "run",
            "--test",
            "data/test",
            "--out",
            "pred.csv",
        ],
        d,
    );
    assert_eq!(
        fs::read(d.join("pred.csv")).unwrap(),
        fs::read(d.join("run/predictions.csv")).unwrap()
    );
    let (src, _) = scores(&ok(
        &[
            "evaluate",
            "--pred",
            "pred.csv",
            "--labels",
            "data/test/labels.csv",
        ],
        d,
    ));
    assert!(src > 0.99, "src {src}");

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["k"], 3);
    assert!(manifest["inputs"]
        .as_object()
        .unwrap()
        .contains_key("fast.toml"));
    assert!(manifest["inputs"]
        .as_object()
        .unwrap()
        .contains_key("data/train/posts.csv"));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    ok(
        &[
            "train",
            "--config",
            "fast.toml",
            "--k",
            "2",
            "--train",
            "data/train",
            "--test",
            "data/test",
            "--blocks",
            "time,eu",
            "--out",
            "run",
        ],
        d,
    );
    assert!(d.join("run/fold1.smpm").is_file());
    assert!(!d.join("run/fold2.smpm").exists());
}

#[test]
fn threads_do_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    for (t, out) in [("1", "r1"), ("3", "r3")] {
        ok(
            &[
                "train",
                "--config",
                "fast.toml",
                "--threads",
                t,
                "--model",
                "mlp",
                "--train",
                "data/train",
                "--test",
                "data/test",
                "--blocks",
                "time,eu,image",
                "--out",
                out,
            ],
            d,
        );
    }
    assert_eq!(
        fs::read(d.join("r1/predictions.csv")).unwrap(),
        fs::read(d.join("r3/predictions.csv")).unwrap()
    );
}

#[test]
fn ablate_two_subsets_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    fs::write(d.join("subsets.txt"), "time,eu\ntime\n").unwrap();
    ok(
        &[
            "ablate",
            "--config",
            "fast.toml",
            "--train",
            "data/train",
            "--test",
            "data/test",
            "--subsets",
            "subsets.txt",
            "--out",
            "abl.csv",
        ],
        d,
    );
    let csv = fs::read_to_string(d.join("abl.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "blocks,model,src,mae");
    assert!(lines[1].starts_with("time+eu,ensemble,"));
    assert!(lines[2].starts_with("time,ensemble,"));
    let m: Value =
        serde_json::from_str(&fs::read_to_string(d.join("abl.csv.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn ensemble_and_correlate_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    fs::write(d.join("a.csv"), "pid,prediction\n1,1\n2,2\n").unwrap();
    fs::write(d.join("b.csv"), "pid,prediction\n2,4\n1,3\n").unwrap();
    ok(
        &[
            "ensemble", "--pred-a", "a.csv", "--pred-b", "b.csv", "--alpha", "0.25", "--out",
            "e.csv",
        ],
        d,
    );
    assert_eq!(
        fs::read_to_string(d.join("e.csv")).unwrap(),
        "pid,prediction\n1,2.5\n2,3.5\n"
    );
    let text = ok(
        &["correlate", "--train", "data/train", "--out", "corr.csv"],
        d,
    );
    assert!(text.lines().nth(1).unwrap().starts_with("eu.follower"));
    let corr = fs::read_to_string(d.join("corr.csv")).unwrap();
    assert!(corr.starts_with("feature,abs_src\neu.follower,"), "{corr}");
    assert!(d.join("corr.csv.manifest.json").is_file());
}

fn single_error_line(out: &Output) -> String {
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    err.trim_end().to_string()
}

#[test]
fn errors_are_single_machine_parsable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: [(&[&str], &str); 4] = [
        (
            &["evaluate", "--pred", "missing.csv", "--labels", "x.csv"],
            "error: io: ",
        ),
        (
            &["train", "--test", "t", "--out", "o"],
            "error: usage: missing --train",
        ),
        (&["frobnicate"], "error: usage: "),
        (
            &[
                "correlate",
                "--train",
                ".",
                "--out",
                "c.csv",
                "--blocks",
                "time,bogus",
            ],
            "error: ",
        ),
    ];
    for (args, prefix) in cases {
        let line = single_error_line(&smp(args, d));
        assert!(line.starts_with(prefix), "{args:?}: {line}");
    }
    fs::write(d.join("bad.toml"), "unknown_key = 1\n").unwrap();
    let line = single_error_line(&smp(&["--config", "bad.toml", "evaluate"], d));
    assert!(
        line.starts_with("error: runtime: config bad.toml"),
        "{line}"
    );
}

#[test]
fn unknown_block_reports_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let line = single_error_line(&smp(
        &[
            "transform",
            "--train",
            "data/train",
            "--blocks",
            "time,bogus",
            "--state-out",
            "s.json",
        ],
        d,
    ));
    assert_eq!(line, "error: unknown-block: unknown feature block `bogus`");
}
