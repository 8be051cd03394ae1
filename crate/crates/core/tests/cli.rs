//! The `sfm` binary: exit codes, artifacts and reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sfm_core::cli::MotionFile;
use sfm_core::metrics::EvalReport;

fn sfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfm")).args(args).env("SFM_THREADS", "1").output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_motion(path: &Path) -> MotionFile {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn solve(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["solve", "--out", s(out)];
    args.extend_from_slice(extra);
    sfm(&args)
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&sfm(&["--help"])), 0);
    assert_eq!(code(&sfm(&["solve", "--no-such-flag"])), 2);
    assert_eq!(code(&sfm(&["frobnicate"])), 2);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("missing.png");
    for args in [
        vec!["--scene", "static", "--weights", "bogus=1"],
        vec!["--scene", "static", "--weights", "fb=-1"],
        vec!["--scene", "nowhere"],
        vec!["--frame-t", s(&missing), "--frame-tp1", s(&missing)],
        vec!["--scene", "static", "--intrinsics", "1,2"],
        vec!["--scene", "static", "--gt-pose", s(&missing)],
    ] {
        let result = solve(&out, &args);
        assert_eq!(code(&result), 2, "{args:?}: {}", String::from_utf8_lossy(&result.stderr));
    }
    let bad_config = dir.path().join("bad.json");
    std::fs::write(&bad_config, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(code(&sfm(&["solve", "--config", s(&bad_config)])), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_sfm"))
        .args(["gradcheck", "--problems", "1", "--points", "1", "--size", "6"])
        .env("SFM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}

#[test]
fn solve_writes_every_artifact_and_keeps_a_static_camera_still() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("static");
    let result = solve(&out, &["--scene", "static", "--iters", "200", "--k", "2"]);
    assert_eq!(code(&result), 0, "{}", String::from_utf8_lossy(&result.stderr));
    for f in ["depth.pfm", "flow.flo", "flow.png", "mask_0.png", "mask_1.png", "motion.json", "loss.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(!out.join("mask_2.png").exists());
    let motion = read_motion(&out.join("motion.json"));
    assert_eq!(motion.objects.len(), 2);
    assert!(motion.camera.t().norm() < 1e-2);
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(csv.starts_with("iteration,total,"));
    assert_eq!(csv.lines().count(), 201);
}

#[test]
fn identical_runs_produce_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"scene": "one-object", "out": "a", "solver": {"iterations": 40, "k": 2, "seed": 5}}"#)
        .unwrap();
    let b = dir.path().join("b");
    assert_eq!(code(&sfm(&["solve", "--config", s(&config)])), 0);
    assert_eq!(code(&sfm(&["solve", "--config", s(&config), "--out", s(&b)])), 0);
    let a = dir.path().join("a");
    for f in ["depth.pfm", "flow.flo", "flow.png", "mask_0.png", "mask_1.png", "motion.json", "loss.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = dir.path().join("c");
    assert_eq!(code(&sfm(&["solve", "--config", s(&config), "--out", s(&c), "--seed", "6"])), 0);
    assert_ne!(std::fs::read(a.join("depth.pfm")).unwrap(), std::fs::read(c.join("depth.pfm")).unwrap());
}

#[test]
fn solve_from_image_files_with_supervision() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    assert_eq!(code(&sfm(&["synth", "--out", s(&gt), "--width", "24", "--height", "20"])), 0);
    let scene = gt.join("cam-translate");
    let out = dir.path().join("pred");
    let result = solve(
        &out,
        &[
            "--frame-t",
            s(&scene.join("frame_t.png")),
            "--frame-tp1",
            s(&scene.join("frame_tp1.png")),
            "--k",
            "0",
            "--iters",
            "60",
            "--pyramid",
            "on",
            "--intrinsics",
            "1,0.5,0.5",
            "--gt-depth",
            s(&scene.join("depth.pfm")),
            "--gt-pose",
            s(&scene.join("motion.json")),
            "--gt-flow",
            s(&scene.join("flow.flo")),
        ],
    );
    assert_eq!(code(&result), 0, "{}", String::from_utf8_lossy(&result.stderr));
    let header = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let header = header.lines().next().unwrap();
    for term in ["depth_sup", "pose_trans", "pose_rot", "flow_sup"] {
        assert!(header.contains(term), "{header}");
    }
    // A rotation-matrix pose file is accepted as well.
    let pose = dir.path().join("pose.json");
    std::fs::write(&pose, r#"{"rotation": [[1,0,0],[0,1,0],[0,0,1]], "translation": [0.1, 0, 0]}"#).unwrap();
    let again = solve(
        &dir.path().join("pred2"),
        &["--scene", "cam-translate", "--k", "0", "--iters", "5", "--gt-pose", s(&pose)],
    );
    assert_eq!(code(&again), 0, "{}", String::from_utf8_lossy(&again.stderr));
}

#[test]
fn synth_then_eval_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    assert_eq!(code(&sfm(&["synth", "--out", s(&gt), "--seed", "2"])), 0);
    let names: Vec<PathBuf> = std::fs::read_dir(&gt).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(names.len() >= 6);
    let report_dir = dir.path().join("report");
    let result = sfm(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--out", s(&report_dir)]);
    assert_eq!(code(&result), 0, "{}", String::from_utf8_lossy(&result.stderr));
    let report = EvalReport::from_json(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    for (pair, metrics) in &report.pairs {
        for (metric, value) in metrics {
            let expected = if metric == "mask_iou" { 1.0 } else { 0.0 };
            assert_eq!(*value, expected, "{pair}.{metric}");
        }
    }
    assert!(report.get("two-objects", "mask_iou").is_some());
    assert!(report_dir.join("report.txt").is_file());
}

#[test]
fn eval_of_a_single_pair_and_of_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    assert_eq!(code(&sfm(&["synth", "--out", s(&gt)])), 0);
    let pred = dir.path().join("one");
    assert_eq!(code(&solve(&pred, &["--scene", "one-object", "--iters", "20"])), 0);
    let result = sfm(&["eval", "--pred", s(&pred), "--gt", s(&gt.join("one-object"))]);
    assert_eq!(code(&result), 0, "{}", String::from_utf8_lossy(&result.stderr));
    let text = std::fs::read_to_string(pred.join("report.txt")).unwrap();
    for metric in ["log_rmse", "trans_err", "rot_err", "mask_iou", "epe"] {
        assert!(text.contains(&format!("one.{metric}=")), "{text}");
    }
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&sfm(&["eval", "--pred", s(&empty), "--gt", s(&empty)])), 1);
    assert_eq!(code(&sfm(&["eval", "--pred", s(&dir.path().join("nope")), "--gt", s(&empty)])), 2);
}

#[test]
fn gradcheck_passes_on_the_default_seed() {
    let result = sfm(&["gradcheck", "--problems", "3", "--points", "20", "--size", "10"]);
    assert_eq!(code(&result), 0, "{}", String::from_utf8_lossy(&result.stdout));
    let text = String::from_utf8_lossy(&result.stdout);
    assert!(text.lines().all(|l| l.is_empty() || l.starts_with("PASS")), "{text}");
}
