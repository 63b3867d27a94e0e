use std::path::Path;

use omnidistill::cli::{run_cli, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use omnidistill::distill::DetectionRecord;
use omnidistill::imageio::{read_jsonl, write_jsonl};

const SMALL: &str = r#"{
    "sim": {"duration": 6, "world": {"student": {"size": 256}, "teacher": {"width": 320, "height_px": 180}}},
    "distill": {"memory_window": 4},
    "eval": {"window": 3, "annotation_period": 0.5, "count_window": 2}
}"#;

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("omnidistill").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let rec = dir.join("rec");
    assert_eq!(cli(&["simulate", "--config", s(&cfg), "--out", s(&rec)]), EXIT_OK);
    cfg
}

#[test]
fn simulate_writes_the_recording() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let rec = dir.path().join("rec");
    for f in ["gt.jsonl", "teacher.jsonl", "homography.json", "manifest.json", "student/000071.png", "teacher/000000.png"] {
        assert!(rec.join(f).exists(), "{f} missing");
    }
    let gt: Vec<DetectionRecord> = read_jsonl(&rec.join("gt.jsonl")).unwrap();
    assert_eq!(gt.len(), 72);
}

#[test]
fn config_problems_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(cli(&["simulate", "--config", "/nonexistent/cfg.json", "--out", s(&out)]), EXIT_USAGE);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"vibe": {"radus": 20}}"#).unwrap();
    assert_eq!(cli(&["simulate", "--config", s(&bad), "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert!(!out.exists());
}

#[test]
fn replay_runs_are_reproducible_and_gates_differ() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path());
    let rec = dir.path().join("rec");
    let run = |name: &str, cfg: &Path| {
        let out = dir.path().join(name);
        assert_eq!(cli(&["run", "--config", s(cfg), "--input", s(&rec), "--out", s(&out), "--clock", "replay"]), EXIT_OK);
        std::fs::read_to_string(out.join("detections.jsonl")).unwrap()
    };
    let a = run("a", &cfg);
    let b = run("b", &cfg);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 72);
    let log = std::fs::read_to_string(dir.path().join("a/training_log.csv")).unwrap();
    assert!(log.starts_with("swap_time,epoch_index,"));
    assert!(log.lines().count() > 1, "no weight swap recorded");

    let mut v: serde_json::Value = serde_json::from_str(SMALL).unwrap();
    v["gate"] = serde_json::json!({"mode": "none"});
    let none_cfg = dir.path().join("none.json");
    std::fs::write(&none_cfg, v.to_string()).unwrap();
    let c = run("c", &none_cfg);
    assert_ne!(a, c);

    let ev = dir.path().join("ev");
    let det = dir.path().join("a/detections.jsonl");
    let gt = rec.join("gt.jsonl");
    assert_eq!(cli(&["eval", "--detections", s(&det), "--gt", s(&gt), "--config", s(&cfg), "--out", s(&ev)]), EXIT_OK);
    for f in ["ap_overall.csv", "ap_overlap.csv", "ap_outside.csv", "tiou_sweep.csv", "counting.csv", "summary.json"] {
        assert!(ev.join(f).exists(), "{f} missing");
    }
}

#[test]
fn offline_and_wall_modes_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path());
    let rec = dir.path().join("rec");
    for (name, extra) in [("off", ["--mode", "offline"]), ("wall", ["--clock", "wall"])] {
        let out = dir.path().join(name);
        let mut args = vec!["run", "--config", s(&cfg), "--input", s(&rec), "--out", s(&out), "--dump-supervision"];
        args.extend(extra);
        assert_eq!(cli(&args), EXIT_OK, "{name}");
        let det: Vec<DetectionRecord> = read_jsonl(&out.join("detections.jsonl")).unwrap();
        assert_eq!(det.len(), 72);
        assert!(out.join("supervision").read_dir().unwrap().next().is_some());
    }
}

#[test]
fn desynchronized_teacher_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path());
    let rec = dir.path().join("rec");
    let mut teacher: Vec<DetectionRecord> = read_jsonl(&rec.join("teacher.jsonl")).unwrap();
    // Past the half-frame tolerance, onto the next frame's slot.
    teacher[5].t += 0.06;
    write_jsonl(&rec.join("teacher.jsonl"), &teacher).unwrap();
    let out = dir.path().join("o");
    assert_eq!(cli(&["run", "--config", s(&cfg), "--input", s(&rec), "--out", s(&out)]), EXIT_FAILURE);
}

fn eval_summary(dir: &Path, cfg: &Path, dets: &[DetectionRecord]) -> serde_json::Value {
    let det = dir.join("det.jsonl");
    write_jsonl(&det, dets).unwrap();
    let gt = dir.join("rec/gt.jsonl");
    let out = dir.join("ev");
    assert_eq!(cli(&["eval", "--detections", s(&det), "--gt", s(&gt), "--config", s(cfg), "--out", s(&out)]), EXIT_OK);
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn eval_of_perfect_and_empty_detections() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path());
    let gt: Vec<DetectionRecord> = read_jsonl(&dir.path().join("rec/gt.jsonl")).unwrap();

    let perfect = eval_summary(dir.path(), &cfg, &gt);
    assert_eq!(perfect["final_ap"]["overall"].as_f64(), Some(1.0));
    // A region without ground truth in the final window has no AP.
    for region in ["overlap", "outside"] {
        let ap = perfect["final_ap"][region].as_f64();
        assert!(ap.is_none() || ap == Some(1.0), "{region}: {ap:?}");
    }
    assert_eq!(perfect["counting_rmse_final"].as_f64(), Some(0.0));

    let empty: Vec<DetectionRecord> = gt.iter().map(|r| DetectionRecord { t: r.t, boxes: vec![] }).collect();
    let none = eval_summary(dir.path(), &cfg, &empty);
    assert_eq!(none["final_ap"]["overall"].as_f64(), Some(0.0));
    assert_eq!(none["final_mean_count"].as_f64(), Some(0.0));

    let csv = std::fs::read_to_string(dir.path().join("ev/tiou_sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("tiou,ap"));
    assert!(lines.all(|l| l.split(',').count() == 2 && l.split(',').all(|x| x.parse::<f64>().is_ok())));

    let shifted: Vec<DetectionRecord> = gt.iter().map(|r| DetectionRecord { t: r.t + 100.0, boxes: vec![] }).collect();
    let det = dir.path().join("far.jsonl");
    write_jsonl(&det, &shifted).unwrap();
    let g = dir.path().join("rec/gt.jsonl");
    let out = dir.path().join("ev2");
    assert_eq!(cli(&["eval", "--detections", s(&det), "--gt", s(&g), "--config", s(&cfg), "--out", s(&out)]), EXIT_FAILURE);
}

#[test]
fn homography_command_recovers_the_transform() {
    let dir = tempfile::tempdir().unwrap();
    let h = [[1.2, 0.1, 5.0], [-0.05, 0.9, 3.0], [1e-4, 2e-4, 1.0]];
    let mut rows = String::from("tx,ty,sx,sy\n");
    for (x, y) in [(0.0, 0.0), (100.0, 0.0), (0.0, 80.0), (100.0, 80.0), (50.0, 30.0), (20.0, 70.0)] {
        let w = h[2][0] * x + h[2][1] * y + h[2][2];
        let u = (h[0][0] * x + h[0][1] * y + h[0][2]) / w;
        let v = (h[1][0] * x + h[1][1] * y + h[1][2]) / w;
        rows += &format!("{x} {y} {u} {v}\n");
    }
    let pairs = dir.path().join("pairs.txt");
    std::fs::write(&pairs, rows).unwrap();
    let out = dir.path().join("h.json");
    assert_eq!(cli(&["homography", "--pairs", s(&pairs), "--out", s(&out)]), EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v["mean_reprojection_error"].as_f64().unwrap() < 1e-8);
    let got: Vec<f64> = serde_json::from_value(v["homography"].clone()).unwrap();
    let flat: Vec<f64> = h.iter().flatten().copied().collect();
    for (a, b) in got.iter().zip(&flat) {
        assert!((a - b).abs() < 1e-8, "{got:?}");
    }
}
