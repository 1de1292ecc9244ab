use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_headplan");

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Outcome {
    fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).expect("report is JSON")
    }
}

fn run(args: &[&str]) -> Outcome {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    Outcome {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn core_fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

/// One BDD frame holding a `w x h` box per entry.
fn write_bdd(dir: &Path, boxes: &[(u32, u32)]) -> PathBuf {
    let labels: Vec<Value> = boxes
        .iter()
        .map(|&(w, h)| serde_json::json!({"category": "car", "box2d": {"x1": 0, "y1": 0, "x2": w, "y2": h}}))
        .collect();
    let path = dir.join("frames.json");
    std::fs::write(
        &path,
        serde_json::json!([{"name": "a.jpg", "labels": labels}]).to_string(),
    )
    .unwrap();
    path
}

/// Lowest-to-highest head whose bound `ceil(2^i * w_o / w_in)^2` the area reaches.
fn hand_bucket(area: u64, w_o: u64, w_in: u64) -> Option<usize> {
    (1..=5u32)
        .rev()
        .find(|&i| {
            let side = (2u64.pow(i) * w_o).div_ceil(w_in);
            area >= side * side
        })
        .map(|i| i as usize)
}

#[test]
fn analyze_writes_six_csv_rows_per_width() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("h.csv");
    let ann = core_fixture("bdd_three_frames.json");
    let o = run(&[
        "analyze",
        "--ann",
        &ann,
        "--format",
        "bdd",
        "--win",
        "416,800,1504",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("width_in,head,count,ratio"));
    assert_eq!(lines.count(), 18);
    let r = o.json();
    assert_eq!(r["histograms"].as_array().unwrap().len(), 3);
    assert_eq!(r["inputs"]["load_summary"]["kept"], 7);
    assert!(r["warnings"]
        .as_array()
        .unwrap()
        .iter()
        .any(|w| w.as_str().unwrap().contains("clamped")));
}

#[test]
fn analyze_coco_fixture() {
    let o = run(&[
        "analyze",
        "--ann",
        &core_fixture("coco_five_images.json"),
        "--format",
        "coco",
        "--win",
        "640",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.json()["histograms"][0]["total"], 12);
}

#[test]
fn unknown_format_is_usage_error() {
    let o = run(&[
        "analyze",
        "--ann",
        &core_fixture("bdd_three_frames.json"),
        "--format",
        "yolo",
    ]);
    assert_eq!(o.code, 2);
}

#[test]
fn bad_image_size_and_missing_file_are_input_errors() {
    let ann = core_fixture("bdd_three_frames.json");
    assert_eq!(
        run(&[
            "analyze",
            "--ann",
            &ann,
            "--format",
            "bdd",
            "--image-size",
            "1280by720"
        ])
        .code,
        2
    );
    assert_eq!(
        run(&["analyze", "--ann", "/nonexistent.json", "--format", "bdd"]).code,
        2
    );
}

#[test]
fn uniform_large_boxes_fall_in_hand_computed_bucket() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_bdd(dir.path(), &[(100, 100); 6]);
    let o = run(&[
        "analyze",
        "--ann",
        ann.to_str().unwrap(),
        "--format",
        "bdd",
        "--win",
        "416",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let expected = hand_bucket(10_000, 1280, 416).expect("above the first bound");
    let h = &o.json()["histograms"][0];
    for i in 1..=5 {
        let want = if i == expected { 6 } else { 0 };
        assert_eq!(h["counts"][format!("H{i}")], want, "H{i}");
    }
    assert_eq!(h["residual_small"], 0);
}

#[test]
fn recommend_wide_spread_gives_alternate_pair() {
    // at (1280, 800) the bounds are 16, 49, 169, 676, 2704
    let mut boxes = vec![(10, 10); 10];
    boxes.extend([(20, 20); 30]);
    boxes.extend([(40, 25); 40]);
    boxes.extend([(100, 50); 20]);
    let expected: Vec<usize> = boxes
        .iter()
        .map(|&(w, h)| hand_bucket(u64::from(w * h), 1280, 800).unwrap())
        .collect();
    assert!(expected.iter().all(|&b| (2..=5).contains(&b)));

    let dir = tempfile::tempdir().unwrap();
    let ann = write_bdd(dir.path(), &boxes);
    let o = run(&[
        "recommend",
        "--ann",
        ann.to_str().unwrap(),
        "--format",
        "bdd",
        "--win",
        "800",
        "--tau",
        "0.01",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let r = o.json();
    assert_eq!(r["recommendations"]["matched"]["heads"], "H2,H3,H4,H5");
    assert_eq!(r["recommendations"]["cross_scale"]["heads"], "H2,H4");
    assert_eq!(r["recommendations"]["cross_scale"]["ratios"]["H4"], 0.4);
}

#[test]
fn unreachable_tau_has_distinct_status() {
    let o = run(&[
        "recommend",
        "--ann",
        &core_fixture("bdd_three_frames.json"),
        "--format",
        "bdd",
        "--tau",
        "0.99",
    ]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    assert!(o.json()["recommendations"].is_null());
}

#[test]
fn single_head_mass_cannot_form_pair() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_bdd(dir.path(), &[(100, 100); 5]);
    let o = run(&[
        "recommend",
        "--ann",
        ann.to_str().unwrap(),
        "--format",
        "bdd",
        "--win",
        "416",
    ]);
    assert_eq!(o.code, 4);
    assert!(o.stderr.contains("span of size 1"), "{}", o.stderr);
    assert_eq!(o.json()["recommendations"]["matched"]["heads"], "H5");
}

#[test]
fn cost_three_heads_near_published_params() {
    let o = run(&["cost", "--heads", "H3,H4,H5", "--win", "416"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let params = o.json()["costs"][0]["params"].as_f64().unwrap();
    assert!((params / 7.05e6 - 1.0).abs() <= 0.05, "{params}");
}

#[test]
fn cost_compare_reports_negative_delta() {
    let o = run(&["cost", "--heads", "H1,H3", "--compare", "H1-H5"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let c = &o.json()["comparison"];
    assert!(c["params_delta"].as_i64().unwrap() < 0);
    assert!(c["macs_delta"].as_i64().unwrap() < 0);
}

#[test]
fn cost_with_descriptor_file_and_bad_width() {
    let arch = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/yolov5s.arch");
    let o = run(&[
        "cost",
        "--arch",
        arch.to_str().unwrap(),
        "--heads",
        "H2,H4",
        "--win",
        "800",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.json()["costs"][0]["arch"], "yolov5s");
    let o = run(&["cost", "--heads", "H3-H5", "--win", "415"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("divisible"));
}

#[test]
fn rfcheck_reports_forced_values() {
    let o = run(&["rfcheck", "--channels", "32", "--seed", "42"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let r = o.json();
    let s = &r["results"]["support"];
    assert_eq!(s["receptive_field"], 17);
    assert_eq!(s["branch_count"], 9);
    assert_eq!(s["module_count"], 25);
    assert!(r["verification"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["status"] == "PASS"));
}

#[test]
fn rfcheck_rejects_indivisible_channels() {
    assert_eq!(run(&["rfcheck", "--channels", "30"]).code, 2);
}

#[test]
fn out_flag_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let stdout = run(&["cost", "--heads", "H4,H5"]).stdout;
    let o = run(&["cost", "--heads", "H4,H5", "--out", path.to_str().unwrap()]);
    assert_eq!(o.code, 0);
    assert!(o.stdout.is_empty());
    let written = std::fs::read_to_string(&path).unwrap();
    // only the echoed command differs
    let mut a: Value = serde_json::from_str(&written).unwrap();
    let mut b: Value = serde_json::from_str(&stdout).unwrap();
    a["command"] = Value::Null;
    b["command"] = Value::Null;
    assert_eq!(a, b);
}
