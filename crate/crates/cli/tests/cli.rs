use std::path::Path;
use std::process::{Command, Output};

use voxdet_cli::ModelFile;
use voxdet_core::synthetic::{desk_anchor_spec, ToyScorer};

fn voxdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxdet")).args(args).output().unwrap()
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

const GTS: &str = r#"{"volume_id":"a","voxel_spacing":[1.0,1.0,1.0],"gts":[{"box":[0.0,0.0,0.0,10.0,10.0,10.0],"category":"benign"}]}
{"volume_id":"b","voxel_spacing":[1.0,1.0,1.0],"gts":[]}
"#;

const DETS: &str = r#"{"volume_id":"a","box":[0.0,0.0,0.0,10.0,10.0,10.0],"score":0.9}
{"volume_id":"a","box":[40.0,40.0,40.0,50.0,50.0,50.0],"score":0.3}
{"volume_id":"b","box":[5.0,5.0,5.0,9.0,9.0,9.0],"score":0.6}
"#;

fn eval_fixture(dir: &Path) {
    std::fs::write(dir.join("gts.jsonl"), GTS).unwrap();
    std::fs::write(dir.join("dets.jsonl"), DETS).unwrap();
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(voxdet(&["--help"]).status.code(), Some(0));
    assert_eq!(voxdet(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(voxdet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(voxdet(&["anchors"]).status.code(), Some(1));
    assert_eq!(voxdet(&["anchors", "--shape", "1,2", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxdet(&["eval", "--gts", p(&dir.path().join("none.jsonl")), "--detections", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("none.jsonl"));
}

#[test]
fn bad_config_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[anchor]\nstride = [16, 16, 16]\n\n[loss]\neta = -2.0\n").unwrap();
    let out = voxdet(&["--config", p(&cfg), "anchors", "--out", p(&dir.path().join("a.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("bad.toml:5:"), "{msg}");
}

#[test]
fn five_sizes_at_stride_16_give_4000_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let out = voxdet(&[
        "anchors",
        "--set",
        "anchor.basic_sizes=[8, 16, 28, 40, 55]",
        "--set",
        "anchor.stride=[16, 16, 16]",
        "--shape",
        "64,32,64",
        "--out",
        p(&path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4000);
    assert!(stdout(&out).starts_with("4000 anchors"));
}

#[test]
fn synth_gen_zero_count_writes_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = voxdet(&["synth-gen", "--count", "0", "--out", p(&data)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(data.join("gts.jsonl")).unwrap(), "");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 0);
}

#[test]
fn eval_prints_the_table_row() {
    let dir = tempfile::tempdir().unwrap();
    eval_fixture(dir.path());
    let report = dir.path().join("eval.json");
    let d = |n: &str| dir.path().join(n);
    let out = voxdet(&["eval", "--gts", p(&d("gts.jsonl")), "--detections", p(&d("dets.jsonl")), "--out", p(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(lines[0], "mIoU(%) FPs Sensitivity(%)");
    // One lesion found exactly; two FPs over two volumes.
    assert_eq!(lines[1], "100.00 1.00 100.00");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["metrics"]["n_false_positives"], 2);
}

#[test]
fn eval_rejects_unknown_volume_ids() {
    let dir = tempfile::tempdir().unwrap();
    eval_fixture(dir.path());
    let d = |n: &str| dir.path().join(n);
    std::fs::write(d("dets.jsonl"), r#"{"volume_id":"zz","box":[0,0,0,1,1,1],"score":0.5}"#).unwrap();
    let out = voxdet(&["eval", "--gts", p(&d("gts.jsonl")), "--detections", p(&d("dets.jsonl")), "--out", p(&d("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("zz"));
}

#[test]
fn froc_with_zero_and_one_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    eval_fixture(dir.path());
    let d = |n: &str| dir.path().join(n);
    let out = voxdet(&[
        "froc",
        "--gts",
        p(&d("gts.jsonl")),
        "--detections",
        p(&d("dets.jsonl")),
        "--thresholds",
        "0,1",
        "--out",
        p(&d("froc.csv")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(d("froc.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows, ["threshold,fps_per_volume,sensitivity", "0,1,1", "1,0,0"]);
}

#[test]
fn froc_rejects_descending_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    eval_fixture(dir.path());
    let d = |n: &str| dir.path().join(n);
    let out = voxdet(&[
        "froc",
        "--gts",
        p(&d("gts.jsonl")),
        "--detections",
        p(&d("dets.jsonl")),
        "--thresholds",
        "0.5,0.1",
        "--out",
        p(&d("f.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupted_gradient_names_the_term() {
    let out = voxdet(&["gradcheck", "--batches", "5", "--corrupt", "l_reg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("l_reg"), "{}", stderr(&out));
    let ok = voxdet(&["gradcheck", "--batches", "5"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert_eq!(stdout(&ok).lines().filter(|l| l.ends_with("PASS")).count(), 4);
}

#[test]
fn zero_weight_model_gives_uniform_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let gen = voxdet(&["synth-gen", "--count", "2", "--out", p(&d("data"))]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let model = ModelFile {
        anchor: desk_anchor_spec(),
        scorer: ToyScorer::zeros(8),
    };
    std::fs::write(d("model.json"), serde_json::to_string(&model).unwrap()).unwrap();
    let out = voxdet(&["infer", "--model", p(&d("model.json")), "--data", p(&d("data")), "--out", p(&d("dets.jsonl"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let scores: Vec<f64> = std::fs::read_to_string(d("dets.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["score"].as_f64().unwrap())
        .collect();
    assert!(!scores.is_empty());
    assert!(scores.iter().all(|s| (s - scores[0]).abs() < 1e-9), "{scores:?}");
}

#[test]
fn train_toy_writes_model_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    assert!(voxdet(&["synth-gen", "--count", "2", "--out", p(&d("data"))]).status.success());
    let out = voxdet(&["train-toy", "--set", "train.steps=5", "--data", p(&d("data")), "--out", p(&d("m"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let history = std::fs::read_to_string(d("m").join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);
    let model: ModelFile = serde_json::from_str(&std::fs::read_to_string(d("m").join("model.json")).unwrap()).unwrap();
    assert_eq!(model.anchor, desk_anchor_spec());
}
