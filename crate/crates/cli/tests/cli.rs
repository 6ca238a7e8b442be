use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn boostret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boostret"))
        .args(args)
        .output()
        .expect("spawn boostret")
}

fn ok(args: &[&str]) -> String {
    let out = boostret(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_corpus(dir: &Path, seed: &str) {
    ok(&[
        "gen-data",
        "--out",
        p(dir),
        "--seed",
        seed,
        "--n-identities",
        "40",
        "--images-per-id",
        "3",
    ]);
}

const SHORT: [&str; 6] = ["--epochs", "6", "--warmup-epochs", "2", "--refresh-epochs", "2"];

#[test]
fn help_lists_subcommands() {
    let text = ok(&["--help"]);
    for sub in ["gen-data", "train", "eval", "mine", "ablate", "report"] {
        assert!(text.contains(sub), "missing {sub} in help");
    }
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(boostret(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(boostret(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(
        boostret(&["train", "--loss-preset", "bogus", "--data", "x", "--out", "y"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_corpus_is_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = boostret(&[
        "train",
        "--data",
        p(&dir.path().join("absent")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: "));
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unit_boost_weight_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_corpus(&data, "3");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut args = vec![
        "train",
        "--data",
        p(&data),
        "--out",
        p(&a),
        "--loss-preset",
        "clip",
    ];
    args.extend(SHORT);
    ok(&args);
    let mut args = vec![
        "train",
        "--data",
        p(&data),
        "--out",
        p(&b),
        "--loss-preset",
        "clip",
        "--boost-weight",
        "1.0",
    ];
    args.extend(SHORT);
    ok(&args);
    let ma = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mb = fs::read_to_string(b.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    // The weighted run did mine; it only assigned unit weights.
    assert!(
        fs::read_to_string(b.join("refresh.jsonl"))
            .unwrap()
            .lines()
            .count()
            >= 2
    );
    assert!(
        !a.join("refresh.jsonl").exists() || fs::read_to_string(a.join("refresh.jsonl")).unwrap().is_empty()
    );
}

#[test]
fn train_eval_mine_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, other, run) = (
        dir.path().join("data"),
        dir.path().join("other"),
        dir.path().join("run"),
    );
    tiny_corpus(&data, "5");
    tiny_corpus(&other, "6");
    let mut args = vec![
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--loss-preset",
        "clip+b",
    ];
    args.extend(SHORT);
    let stdout = ok(&args);
    assert!(stdout.starts_with("test r1="));

    let plain: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--checkpoint", p(&run), "--data", p(&data)])).unwrap();
    let eval_path = dir.path().join("eval.json");
    ok(&[
        "eval",
        "--checkpoint",
        p(&run.join("checkpoint")),
        "--data",
        p(&data.join("test")),
        "--distractor",
        p(&other),
        "--out",
        p(&eval_path),
    ]);
    let mixed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&eval_path).unwrap()).unwrap();
    assert!(mixed["n_gallery"].as_u64() > plain["n_gallery"].as_u64());
    assert!(mixed["map"].as_f64().unwrap() <= plain["map"].as_f64().unwrap());

    let mined = ok(&["mine", "--checkpoint", p(&run), "--data", p(&data), "--k", "2"]);
    for line in mined.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["rank"], 2);
        assert!(v["rank1_identity"].is_u64());
    }

    let report = dir.path().join("report");
    ok(&["report", "--run", p(&run), "--out", p(&report)]);
    let csv = fs::read_to_string(report.join("comparison.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    for delta in row.split(',').skip(5) {
        assert_eq!(delta.parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn resume_continues_run() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    tiny_corpus(&data, "8");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "3"]);
    let first = ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--epochs",
        "5",
        "--resume",
    ]);
    let fresh = dir.path().join("fresh");
    let second = ok(&["train", "--data", p(&data), "--out", p(&fresh), "--epochs", "5"]);
    assert_eq!(first, second);
}

#[test]
fn ablate_sweep_has_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.json");
    fs::write(&cfg, r#"{"n_identities": 30, "images_per_id": 3}"#).unwrap();
    let out = dir.path().join("sweep");
    let mut args = vec![
        "ablate",
        "--axis",
        "k",
        "--values",
        "2,3",
        "--seeds",
        "1,2",
        "--data-config",
        p(&cfg),
        "--out",
        p(&out),
    ];
    args.extend(SHORT);
    ok(&args);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(out.join("report.md").exists());

    let again = dir.path().join("again");
    ok(&["report", "--ablation", p(&out), "--out", p(&again)]);
    assert_eq!(fs::read_to_string(again.join("ablation.csv")).unwrap(), csv);
}
