use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use segtad::data::{AnnotationFile, PredictionFile};
use segtad::eval::EvalReport;

fn segtad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segtad"))
        .args(args)
        .current_dir(dir)
        .env_remove("SEGTAD_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = segtad(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit status is nonzero and stderr is exactly one `error: <kind>: ...` line.
fn fails_with(dir: &Path, args: &[&str], kind: &str) -> String {
    let out = segtad(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error: {kind}: ")), "{err}");
    err
}

#[test]
fn gradcheck_passes_on_the_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    assert!(out.contains("ssn+pdn composite"), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn eval_of_the_annotations_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--out", "ds", "--videos", "5"]);
    let ann = AnnotationFile::load(&dir.path().join("ds/annotations.json")).unwrap();
    PredictionFile::from_annotations(&ann)
        .save(&dir.path().join("perfect.json"))
        .unwrap();
    let out = ok(
        dir.path(),
        &["eval", "--data", "ds", "--predictions", "perfect.json", "--out", "report.json"],
    );
    assert!(out.contains("average mAP 1.0000"), "{out}");
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let report: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.average_map, 1.0);
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    ok(d, &["gen-data", "--out", "ds"]);
    assert!(d.join("ds/classes.json").exists());
    assert_eq!(std::fs::read_dir(d.join("ds/features")).unwrap().count(), 20);
    let log = ok(d, &["train", "--data", "ds", "--run", "run", "--epochs", "2"]);
    assert!(log.contains("epoch    2"), "{log}");
    for f in ["checkpoints/epoch_0001.stad", "checkpoints/epoch_0002.stad", "checkpoints/last.stad", "config.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(d.join("run/loss_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,lr,total,seg,det,aux,reg\n"));
    ok(d, &["infer", "--data", "ds", "--run", "run"]);
    let preds = PredictionFile::load(&d.join("run/predictions.json")).unwrap();
    assert_eq!(preds.results.len(), 20);
    assert!(preds.results.values().all(|v| !v.is_empty() && v.len() <= 100));
    let out = ok(
        d,
        &["eval", "--data", "ds", "--predictions", "run/predictions.json", "--out", "run/report.json"],
    );
    assert!(out.contains("average mAP"));
    assert!(start.elapsed() < Duration::from_secs(300));
}

#[test]
fn flags_and_env_pick_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "a", "--seed", "4", "--videos", "3"]);
    let env = Command::new(env!("CARGO_BIN_EXE_segtad"))
        .args(["gen-data", "--out", "b", "--videos", "3"])
        .current_dir(d)
        .env("SEGTAD_SEED", "4")
        .output()
        .unwrap();
    assert!(env.status.success());
    ok(d, &["gen-data", "--out", "c", "--seed", "5", "--videos", "3"]);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/annotations.json"), read("b/annotations.json"));
    assert_eq!(read("a/features/video_0000.sgft"), read("b/features/video_0000.sgft"));
    assert_ne!(read("a/features/video_0000.sgft"), read("c/features/video_0000.sgft"));
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"synthetic": {"n_videos": 2, "snippets": 64, "max_len": 16}, "snippets": 64}"#,
    )
    .unwrap();
    ok(d, &["gen-data", "--config", "cfg.json", "--out", "ds"]);
    assert_eq!(std::fs::read_dir(d.join("ds/features")).unwrap().count(), 2);
    std::fs::write(d.join("bad.json"), r#"{"trian": {}}"#).unwrap();
    fails_with(d, &["gen-data", "--config", "bad.json", "--out", "x"], "json");
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fails_with(d, &["eval", "--data", "missing", "--predictions", "p.json"], "io");
    fails_with(d, &["train", "--unknown-flag"], "usage");
    fails_with(d, &["infer", "--data", "missing", "--run", "run"], "io");
    ok(d, &["gen-data", "--out", "ds", "--videos", "2"]);
    fails_with(d, &["train", "--data", "ds", "--run", "run", "--lr=0"], "config");
    std::fs::write(d.join("p.json"), r#"{"results": {"video_0000": [{"segment": [0, 1], "score": 1, "label": "dance"}]}}"#)
        .unwrap();
    fails_with(d, &["eval", "--data", "ds", "--predictions", "p.json"], "unknown-labels");
    let env = Command::new(env!("CARGO_BIN_EXE_segtad"))
        .args(["gen-data", "--out", "x"])
        .current_dir(d)
        .env("SEGTAD_SEED", "seven")
        .output()
        .unwrap();
    assert!(!env.status.success());
    assert!(String::from_utf8_lossy(&env.stderr).starts_with("error: config: SEGTAD_SEED"));
}

#[test]
fn infer_with_class_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "ds", "--videos", "2"]);
    ok(d, &["train", "--data", "ds", "--run", "run", "--epochs", "1"]);
    let ann = AnnotationFile::load(&d.join("ds/annotations.json")).unwrap();
    let scores: serde_json::Value = ann
        .database
        .iter()
        .map(|(id, v)| {
            let label = v.annotations[0].label.clone();
            (id.clone(), serde_json::json!([{"label": label, "score": 0.5}]))
        })
        .collect::<serde_json::Map<_, _>>()
        .into();
    std::fs::write(d.join("scores.json"), scores.to_string()).unwrap();
    ok(
        d,
        &["infer", "--data", "ds", "--run", "run", "--class-scores", "scores.json", "--out", "p.json"],
    );
    let preds = PredictionFile::load(&d.join("p.json")).unwrap();
    for (id, dets) in &preds.results {
        let label = &ann.database[id].annotations[0].label;
        assert!(dets.iter().all(|p| &p.label == label && p.score <= 0.5));
    }
}
