//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line, whether it passes or not.

use std::f64::consts::{E, PI};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfm_core::geometry::{backproject_point, compute_flow, pixel_to_normalized, project_point};
use sfm_core::gradcheck::{run_suite, SuiteConfig};
use sfm_core::losses::{forward_backward_loss, photometric_loss, Direction};
use sfm_core::metrics::{endpoint_error, mask_iou, relative_pose_error, scale_invariant_log_rmse, EvalReport};
use sfm_core::solver::{optimize, Frame, ProblemState, Solution, SolverConfig};
use sfm_core::synth::{generate_scene, standard_suite, suite_scene, SceneGroundTruth};
use sfm_core::types::{CameraIntrinsics, DepthMap, RigidMotion};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn scene(name: &str) -> SceneGroundTruth {
    generate_scene(&suite_scene(name).expect("suite scene"), 0).expect("scene generates")
}

fn solve(gt: &SceneGroundTruth, k: usize, iterations: usize) -> Solution {
    let config = SolverConfig { iterations, k, ..SolverConfig::default() };
    let init = ProblemState::initial(gt.spec.width, gt.spec.height, k, config.seed);
    optimize(&gt.frame_t, &gt.frame_tp1, &gt.spec.intrinsics, &init, &config, None).expect("solver runs")
}

fn effective_translation(m: &RigidMotion) -> Vector3<f64> {
    m.t() - m.rotation().expect("valid rotation") * m.p()
}

fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let report = run_suite(0, &SuiteConfig::default()).expect("suite runs");
    let elapsed = start.elapsed();
    let worst_primitive = report.primitives.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        report.passed() && elapsed < Duration::from_secs(120),
        format!(
            "{} problems at {}x{} K={}: max rel err {:.2e} (primitives {:.2e}), {} one-sided, {} refined, {:.1}s",
            report.pipeline.points,
            SuiteConfig::default().size,
            SuiteConfig::default().size,
            SuiteConfig::default().k,
            report.pipeline.max_rel_error,
            worst_primitive,
            report.pipeline.one_sided,
            report.pipeline.refined,
            elapsed.as_secs_f64()
        ),
    )
}

fn geometric_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let samples = 100_000;
    for _ in 0..samples {
        let (w, h) = (rng.random_range(1..2000usize), rng.random_range(1..2000usize));
        let (px, py) = (rng.random_range(0..w), rng.random_range(0..h));
        let k =
            CameraIntrinsics::new(rng.random_range(0.2..5.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let depth = 10f64.powf(rng.random_range(-2.0..2.0));
        let p = backproject_point(pixel_to_normalized(px, w), pixel_to_normalized(py, h), depth, &k);
        let (xn, yn) = project_point(&p, &k);
        let err = (xn * w as f64 - 0.5 - px as f64).abs().max((yn * h as f64 - 0.5 - py as f64).abs());
        worst = worst.max(err);
    }
    outcome(worst <= 1e-12, format!("{samples} samples, max pixel error {worst:.2e}"))
}

fn metric_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (16, 12);
    let gt = DepthMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.5..20.0)).collect());
    let pred = DepthMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.5..20.0)).collect());
    let all = vec![true; w * h];
    let base = scale_invariant_log_rmse(&pred, &gt, &all).unwrap();
    let worst = [0.1, 1.0, 10.0]
        .iter()
        .map(|&c| (scale_invariant_log_rmse(&pred.scaled(c), &gt, &all).unwrap() - base).abs())
        .fold(0.0, f64::max);
    let offset =
        DepthMap::new(w, h, gt.data.iter().enumerate().map(|(i, &d)| if i % 2 == 0 { d * E * E } else { d }).collect());
    let hand = scale_invariant_log_rmse(&offset, &gt, &all).unwrap();
    outcome(worst <= 1e-12 && hand == 1.0, format!("max scale deviation {worst:.2e}, half-offset case {hand}"))
}

fn pose_metric() -> Outcome {
    let identity = RigidMotion::identity();
    let same = relative_pose_error(&identity, &Matrix3::identity(), &Vector3::zeros()).unwrap();
    let about_y = Rotation3::from_axis_angle(&Vector3::y_axis(), PI / 6.0).into_inner();
    let (_, angle) = relative_pose_error(&identity, &about_y, &Vector3::zeros()).unwrap();
    let (gap, _) =
        relative_pose_error(&RigidMotion::translation([1.0, 2.0, 2.0]), &Matrix3::identity(), &Vector3::zeros())
            .unwrap();
    outcome(
        same == (0.0, 0.0) && angle == PI / 6.0 && gap == 3.0,
        format!("identical {same:?}, 30 degree rotation {angle}, translation gap {gap}"),
    )
}

fn camera_only_recovery() -> Outcome {
    let gt = scene("cam-translate");
    let start = Instant::now();
    let solution = solve(&gt, 0, 5000);
    let elapsed = start.elapsed();
    let state = &solution.state;
    let direction =
        angle_deg(&effective_translation(&state.camera(Direction::Forward)), &effective_translation(&gt.camera));
    let all = vec![true; gt.flow.u.len()];
    let log_rmse = scale_invariant_log_rmse(&state.depth(Frame::T), &gt.depth_t, &all).unwrap();
    outcome(
        direction < 5.0 && log_rmse < 0.1 && elapsed < Duration::from_secs(300),
        format!(
            "translation direction error {direction:.2} deg, depth log RMSE {log_rmse:.4}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn moving_object_recovery() -> Outcome {
    let gt = scene("one-object");
    let solution = solve(&gt, 3, 3000);
    let state = &solution.state;
    let iou = mask_iou(&state.masks(Frame::T), &gt.object_masks(), 0.5).unwrap();
    let flow = state.flow(Direction::Forward, &gt.spec.intrinsics).unwrap();
    let epe = endpoint_error(&flow, &gt.flow, &gt.visible()).unwrap();
    outcome(iou >= 0.7 && epe < 0.5, format!("mask IoU {iou:.3}, endpoint error {epe:.4} px"))
}

fn forward_backward_consistency() -> Outcome {
    let mut worst_fb: f64 = 0.0;
    let mut worst_photo: f64 = 0.0;
    let mut scenes = Vec::new();
    for spec in standard_suite() {
        let gt = generate_scene(&spec, 0).unwrap();
        if gt.occlusion.iter().any(|&o| o) {
            continue;
        }
        let flow = compute_flow(&gt.depth_t, &gt.masks, &gt.objects, &gt.camera, &spec.intrinsics).unwrap();
        worst_fb = worst_fb.max(forward_backward_loss(&gt.depth_t, &gt.depth_tp1, &flow).unwrap().value);
        worst_photo = worst_photo.max(photometric_loss(&gt.frame_t, &gt.frame_tp1, &flow).unwrap().value);
        scenes.push(spec.name);
    }
    outcome(
        scenes.len() >= 3 && worst_fb < 1e-3 && worst_photo < 1e-2,
        format!(
            "scenes [{}]: max forward-backward {worst_fb:.2e}, max photometric {worst_photo:.2e}",
            scenes.join(", ")
        ),
    )
}

fn run_cli(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sfm")).args(args).env("SFM_THREADS", "1").output().expect("binary runs");
    (out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn eval_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (gt_dir, pred_dir) = (dir.path().join("gt"), dir.path().join("pred"));
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let (ok, err) = run_cli(&["synth", "--out", &s(&gt_dir)]);
    if !ok {
        return outcome(false, format!("synth failed: {err}"));
    }
    let pairs = ["cam-translate", "one-object", "object+camera"];
    for name in pairs {
        let (ok, err) = run_cli(&["solve", "--scene", name, "--iters", "100", "--out", &s(&pred_dir.join(name))]);
        if !ok {
            return outcome(false, format!("solve {name} failed: {err}"));
        }
    }
    let (ok, err) = run_cli(&["eval", "--pred", &s(&pred_dir), "--gt", &s(&gt_dir)]);
    if !ok {
        return outcome(false, format!("eval failed: {err}"));
    }
    let report = EvalReport::from_json(&std::fs::read_to_string(pred_dir.join("report.json")).unwrap()).unwrap();
    let metrics = ["log_rmse", "trans_err", "rot_err", "mask_iou", "epe"];
    let complete = report.get("one-object", "mask_iou").is_some()
        && pairs.iter().all(|p| {
            metrics.iter().filter(|&&m| m != "mask_iou").all(|m| report.get(p, m).is_some_and(f64::is_finite))
        });
    let text_ok = pred_dir.join("report.txt").is_file();
    outcome(
        complete && text_ok,
        format!("{} pairs evaluated, {} aggregate metrics", report.pairs.len(), report.aggregates().len()),
    )
}

fn mask_ablation() -> Outcome {
    let gt = scene("object+camera");
    let photometric = |k: usize| {
        let state = solve(&gt, k, 3000).state;
        let flow = state.flow(Direction::Forward, &gt.spec.intrinsics).unwrap();
        photometric_loss(&gt.frame_t, &gt.frame_tp1, &flow).unwrap().value
    };
    let (with_masks, without) = (photometric(3), photometric(0));
    outcome(with_masks < without, format!("final photometric loss K=3 {with_masks:.5} vs K=0 {without:.5}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("geometric round trip", geometric_round_trip),
        ("metric invariance", metric_invariance),
        ("pose metric", pose_metric),
        ("camera-only recovery", camera_only_recovery),
        ("moving-object recovery", moving_object_recovery),
        ("forward-backward consistency", forward_backward_consistency),
        ("eval end to end", eval_end_to_end),
        ("mask ablation direction", mask_ablation),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| outcome(false, "panicked".into()));
        failed += usize::from(!result.passed);
        println!("{} criterion {}: {name}: {}", if result.passed { "PASS" } else { "FAIL" }, i + 1, result.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
