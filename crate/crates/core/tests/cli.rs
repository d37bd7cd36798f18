use std::path::{Path, PathBuf};
use std::process::Command;

use posemerge::cli::{dispatch, ExitStatus};
use serde_json::{json, Value};

fn call(args: &[&str]) -> (ExitStatus, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv: Vec<&str> = std::iter::once("posemerge").chain(args.iter().copied()).collect();
    let status = dispatch(&argv, &mut out, &mut err);
    (status, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

/// Runs a `--json` command twice, checks the bytes agree and the output
/// validates against the shipped schema.
fn json_call(args: &[&str], schema: &str) -> Value {
    let (status, first, err) = call(args);
    assert_eq!(status, ExitStatus::SUCCESS, "{args:?}: {err}");
    let (_, second, _) = call(args);
    assert_eq!(first, second, "{args:?} is not byte-identical across runs");
    let value: Value = serde_json::from_str(&first).unwrap();
    assert_valid(&value, schema);
    value
}

fn assert_valid(value: &Value, schema: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(schema);
    let schema: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{} rejects output: {errors:?}", path.display());
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn coco_file(dir: &Path) -> PathBuf {
    let annotations: Vec<Value> = (0..4)
        .map(|i| {
            let kp: Vec<f64> = (0..17)
                .flat_map(|k| [10.0 + 4.0 * k as f64 + i as f64, 20.0 + 9.0 * k as f64, 2.0])
                .collect();
            json!({"id": i + 1, "image_id": i / 2 + 1, "category_id": 1, "keypoints": kp,
                   "bbox": [0, 0, 100, 200], "area": 20000})
        })
        .collect();
    let path = dir.join("coco.json");
    let file = json!({"images": [{"id": 1}, {"id": 2}], "annotations": annotations,
                      "categories": [{"id": 1, "name": "person"}]});
    std::fs::write(&path, file.to_string()).unwrap();
    path
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let cfg = json!({"train_a": 60, "train_b": 50, "test_a": 20, "test_b": 20,
                     "hidden": 16, "epochs": 2, "batch_size": 16});
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn schema_ops_validate() {
    let v = json_call(&["schema", "union", "--a", "coco17", "--b", "mpii16", "--json"], "schema.schema.json");
    assert_eq!(v["count"], 21);
    let v = json_call(&["schema", "diff", "--a", "mpii16", "--b", "coco17", "--json"], "schema.schema.json");
    let names: Vec<&str> = v["keypoints"].as_array().unwrap().iter().map(|k| k["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["pelvis", "thorax", "upper_neck", "head_top"]);
}

#[test]
fn convert_then_eval_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let coco = coco_file(dir.path());
    let gt = dir.path().join("gt.json");
    let v = json_call(
        &["convert", "--schema", "coco17", "--in", s(&coco), "--out", s(&gt), "--synthesize-thorax", "--json"],
        "convert.schema.json",
    );
    assert_eq!(v["report"]["converted"], 4);
    assert_eq!(v["report"]["thorax_synthesized"], 4);

    let ap = json_call(
        &["eval", "--gt", s(&gt), "--pred", s(&gt), "--metric", "ap", "--json"],
        "eval.schema.json",
    );
    assert_eq!(ap["means"]["AP"], 1.0);
    assert_eq!(ap["means"]["AR"], 1.0);
    let pck = json_call(
        &["eval", "--gt", s(&gt), "--pred", s(&gt), "--metric", "pck", "--subset", "coco", "--json"],
        "eval.schema.json",
    );
    assert_eq!(pck["means"]["PCK"], 1.0);
    assert_eq!(pck["per_keypoint"].as_array().unwrap().len(), 17);

    let (status, csv, _) = call(&["eval", "--gt", s(&gt), "--pred", s(&gt), "--metric", "ap", "--csv"]);
    assert_eq!(status, ExitStatus::SUCCESS);
    assert!(csv.lines().count() > 1);
}

#[test]
fn malformed_input_is_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"annotations\": [").unwrap();
    let out = dir.path().join("out.json");
    let (status, _, err) = call(&["convert", "--schema", "coco17", "--in", s(&bad), "--out", s(&out)]);
    assert_eq!(status, ExitStatus::INPUT);
    assert!(err.contains("bad.json"));
    assert!(!out.exists());
}

#[test]
fn gradcheck_json_validates() {
    let v = json_call(&["gradcheck", "--cases", "25", "--json"], "gradcheck.schema.json");
    assert_eq!(v["passed"], true);
    let (status, out, _) = call(&["gradcheck", "--cases", "25", "--inject-fault", "--json"]);
    assert_eq!(status, ExitStatus::VALIDATION);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["passed"], false);
    assert_valid(&v, "gradcheck.schema.json");
}

#[test]
fn train_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let v = json_call(
        &["train", "--config", s(&cfg), "--out", s(&out), "--compare", "--seed", "3", "--json"],
        "train.schema.json",
    );
    let labels: Vec<&str> = v["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["baseline", "unified"]);
    for f in ["runlog.json", "report.json", "report.csv", "report.txt", "student.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let runlog: Value = serde_json::from_slice(&std::fs::read(out.join("runlog.json")).unwrap()).unwrap();
    assert_eq!(runlog["seed"], 3);

    let log = out.join("runlog.json");
    let rows = json_call(&["report", "--in", s(&log), "--json"], "table.schema.json");
    assert_eq!(rows[0], v["rows"][1]);
    let (_, text, _) = call(&["report", "--in", s(&log), "--format", "text"]);
    let header = text.lines().next().unwrap();
    for col in ["PCK", "PCK^0.1", "AP", "AP^0.5", "AP^0.75", "AR", "AR^0.5", "AR^0.75", "Kpts", "Avg"] {
        assert!(header.split_whitespace().any(|c| c == col), "missing column {col}");
    }
    let (_, csv, _) = call(&["report", "--in", s(&log), "--format", "csv"]);
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn ablate_writes_grid_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let axes = dir.path().join("axes.json");
    std::fs::write(
        &axes,
        json!({"distill": [true], "alphas": [0.0, 1.0], "betas": [{"mpii": 0.25, "coco": 0.45}]}).to_string(),
    )
    .unwrap();
    let out = dir.path().join("abl");
    let v = json_call(
        &["ablate", "--config", s(&cfg), "--axes", s(&axes), "--seeds", "0,1", "--out", s(&out), "--json"],
        "ablate.schema.json",
    );
    assert_eq!(v["cells"], 4);
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    let rows = json_call(&["report", "--in", s(&out.join("runlog.json")), "--json"], "table.schema.json");
    assert_eq!(rows, v["rows"]);
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "learning_rate": 3}"#).unwrap();
    let (status, _, err) = call(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(status, ExitStatus::INPUT);
    assert!(err.contains("learning_rate"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_posemerge");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["schema", "union", "--a", "coco17", "--b", "mpii16"]), Some(0));
    assert_eq!(code(&["report", "--in", "/nonexistent.json"]), Some(2));
    assert_eq!(code(&["gradcheck", "--cases", "10", "--inject-fault"]), Some(3));
}
