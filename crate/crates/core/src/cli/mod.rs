//! Command-line surface: `solve`, `synth`, `eval` and `gradcheck`.
//!
//! Exit codes: 0 on success, 2 for configuration and usage errors, 1 for
//! failures while running.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{apply_weights, IntrinsicsSetting, RunConfig};

use crate::geometry::rotation_from_sines;
use crate::gradcheck::{run_suite, SuiteConfig};
use crate::io;
use crate::losses::{Direction, Supervision};
use crate::metrics::{self, EvalReport};
use crate::solver::{optimize, Frame, ProblemState};
use crate::synth::{generate_scene, standard_suite_sized, suite_scene, SceneGroundTruth};
use crate::types::{CameraIntrinsics, DepthMap, Image, MotionMaskStack, RigidMotion};

/// Number of pyramid levels used by `--pyramid on` when the config asks for none.
const DEFAULT_PYRAMID_LEVELS: usize = 3;
/// Default depth units per 16-bit PNG count (millimeters to meters).
const DEFAULT_DEPTH_PNG_SCALE: f64 = 1e-3;
/// Soft masks are binarized at this value for evaluation.
const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "sfm", version, about = "Dense depth, camera motion and object motion from frame pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate depth, motions and masks for one frame pair.
    Solve(Box<SolveArgs>),
    /// Write the synthetic scene suite with ground truth.
    Synth(SynthArgs),
    /// Compare predictions against ground truth.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reference frame (PNG or PPM).
    #[arg(long)]
    pub frame_t: Option<PathBuf>,
    /// Target frame (PNG or PPM).
    #[arg(long)]
    pub frame_tp1: Option<PathBuf>,
    /// Solve a named synthetic scene instead of image files.
    #[arg(long, conflicts_with_all = ["frame_t", "frame_tp1"])]
    pub scene: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Number of object motions.
    #[arg(long)]
    pub k: Option<usize>,
    /// Loss weight overrides such as `fb=0.2` or `w_color=1`.
    #[arg(long, num_args = 1.., value_name = "KEY=VAL")]
    pub weights: Vec<String>,
    /// Normalized intrinsics `f,cx,cy`, or `default`.
    #[arg(long, value_name = "F,CX,CY")]
    pub intrinsics: Option<String>,
    /// Focal length in pixels, converted with the frame width.
    #[arg(long, value_name = "PIXELS")]
    pub focal_px: Option<f64>,
    /// Ground-truth depth of frame t (PFM or 16-bit PNG; 0 = missing).
    #[arg(long)]
    pub gt_depth: Option<PathBuf>,
    /// Ground-truth depth of frame t+1.
    #[arg(long)]
    pub gt_depth_tp1: Option<PathBuf>,
    /// Ground-truth camera motion (JSON).
    #[arg(long)]
    pub gt_pose: Option<PathBuf>,
    /// Ground-truth optical flow (.flo).
    #[arg(long)]
    pub gt_flow: Option<PathBuf>,
    /// Depth units per count in 16-bit PNG depth files.
    #[arg(long)]
    pub depth_png_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub pyramid: Option<Toggle>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction directory, or a directory of per-pair subdirectories.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth directory laid out like `--pred`.
    #[arg(long)]
    pub gt: PathBuf,
    /// Where to write `report.txt` and `report.json` (defaults to `--pred`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random full-loss problems.
    #[arg(long, default_value_t = 20)]
    pub problems: usize,
    /// Random inputs per primitive.
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the worker pool at `SFM_THREADS` when set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("SFM_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("SFM_THREADS=`{value}` must be a positive integer")))?;
    // The global pool can only be built once per process; later calls keep the first size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Merges the config file (if any) with flag overrides.
pub fn solve_config(args: &SolveArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if args.scene.is_some() {
        cfg.frame_t = None;
        cfg.frame_tp1 = None;
        cfg.scene = args.scene.clone();
    }
    if args.frame_t.is_some() || args.frame_tp1.is_some() {
        cfg.scene = None;
    }
    macro_rules! take {
        ($($field:ident),*) => {$(
            if let Some(v) = &args.$field {
                cfg.$field = Some(v.clone());
            }
        )*};
    }
    take!(frame_t, frame_tp1, out, gt_depth, gt_depth_tp1, gt_pose, gt_flow, focal_px, depth_png_scale);
    if let Some(s) = args.seed {
        cfg.solver.seed = s;
    }
    if let Some(n) = args.iters {
        cfg.solver.iterations = n;
    }
    if let Some(k) = args.k {
        cfg.solver.k = k;
    }
    if let Some(text) = &args.intrinsics {
        cfg.intrinsics = IntrinsicsSetting::parse(text)?;
    }
    match args.pyramid {
        Some(Toggle::On) if cfg.solver.pyramid_levels < 2 => cfg.solver.pyramid_levels = DEFAULT_PYRAMID_LEVELS,
        Some(Toggle::Off) => cfg.solver.pyramid_levels = 1,
        _ => {}
    }
    apply_weights(&mut cfg.solver.weights, &args.weights)?;
    cfg.solver.required.depth = cfg.gt_depth.is_some() || cfg.gt_depth_tp1.is_some();
    cfg.solver.required.pose = cfg.gt_pose.is_some();
    cfg.solver.required.flow = cfg.gt_flow.is_some();
    cfg.validate()?;
    Ok(cfg)
}

/// Camera and object motions as written by `solve` and `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFile {
    /// Camera motion from frame t to t+1.
    pub camera: RigidMotion,
    #[serde(default)]
    pub objects: Vec<RigidMotion>,
    /// Motions from frame t+1 to t, when estimated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward: Option<BackwardMotion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardMotion {
    pub camera: RigidMotion,
    pub objects: Vec<RigidMotion>,
}

/// A pose file holds either a [`MotionFile`] or an explicit rotation matrix and translation.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum PoseFile {
    Matrix { rotation: [[f64; 3]; 3], translation: [f64; 3] },
    Motion(MotionFile),
}

/// Rotation and pivot-free translation `t − R·p` of a motion.
fn effective_pose(m: &RigidMotion) -> Result<(Matrix3<f64>, Vector3<f64>), CliError> {
    let r = rotation_from_sines(m.sin_angles[0], m.sin_angles[1], m.sin_angles[2]).map_err(runtime)?;
    Ok((r, m.t() - r * m.p()))
}

/// Reads a ground-truth camera pose as `(R, t)` with `X' = R·X + t`.
pub fn read_pose(path: &Path) -> Result<(Matrix3<f64>, Vector3<f64>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let pose: PoseFile =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    match pose {
        PoseFile::Matrix { rotation, translation } => {
            Ok((Matrix3::from_fn(|r, c| rotation[r][c]), Vector3::from(translation)))
        }
        PoseFile::Motion(m) => effective_pose(&m.camera),
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_frames(cfg: &RunConfig) -> Result<(Image, Image, Option<CameraIntrinsics>), CliError> {
    if let Some(name) = &cfg.scene {
        let spec = suite_scene(name).ok_or_else(|| CliError::Config(format!("unknown scene `{name}`")))?;
        let gt = generate_scene(&spec, cfg.solver.seed).map_err(runtime)?;
        return Ok((gt.frame_t, gt.frame_tp1, Some(spec.intrinsics)));
    }
    let (a, b) = (cfg.frame_t.as_ref().expect("validated"), cfg.frame_tp1.as_ref().expect("validated"));
    let (ft, ftp1) = (io::read_image(a)?, io::read_image(b)?);
    if (ft.width, ft.height, ft.channels) != (ftp1.width, ftp1.height, ftp1.channels) {
        return Err(CliError::Config("frames differ in size or channel count".into()));
    }
    Ok((ft, ftp1, None))
}

fn load_supervision(cfg: &RunConfig, width: usize, height: usize) -> Result<Supervision, CliError> {
    let scale = cfg.depth_png_scale.unwrap_or(DEFAULT_DEPTH_PNG_SCALE);
    let sized = |what: &str, w: usize, h: usize| {
        if (w, h) == (width, height) {
            Ok(())
        } else {
            Err(CliError::Config(format!("{what} is {w}x{h}, frames are {width}x{height}")))
        }
    };
    let depth = |p: &Option<PathBuf>| -> Result<_, CliError> {
        p.as_ref()
            .map(|p| {
                let d = io::read_depth_supervision(p, scale).map_err(|e| CliError::Config(e.to_string()))?;
                sized("ground-truth depth", d.depth.width, d.depth.height)?;
                Ok(d)
            })
            .transpose()
    };
    let flow = cfg
        .gt_flow
        .as_ref()
        .map(|p| {
            let f = io::read_flo(p).map_err(|e| CliError::Config(e.to_string()))?;
            sized("ground-truth flow", f.width, f.height)?;
            Ok::<_, CliError>(f)
        })
        .transpose()?;
    Ok(Supervision {
        depth_t: depth(&cfg.gt_depth)?,
        depth_tp1: depth(&cfg.gt_depth_tp1)?,
        camera_pose: cfg.gt_pose.as_deref().map(read_pose).transpose()?,
        flow,
    })
}

/// Writes every artifact of a solved pair into `out`.
fn write_solution(
    out: &Path,
    state: &ProblemState,
    intrinsics: &CameraIntrinsics,
    trace_csv: &str,
) -> Result<(), CliError> {
    create_dir(out)?;
    io::write_depth(&out.join("depth.pfm"), &state.depth(Frame::T), 1.0)?;
    let flow = state.flow(Direction::Forward, intrinsics).map_err(runtime)?;
    io::write_flo(&out.join("flow.flo"), &flow)?;
    io::write_image(&out.join("flow.png"), &io::flow_to_color(&flow))?;
    let masks = state.masks(Frame::T);
    for k in 0..masks.k {
        io::write_mask(&out.join(format!("mask_{k}.png")), masks.width, masks.height, &masks.layer(k))?;
    }
    let motion = MotionFile {
        camera: state.camera(Direction::Forward),
        objects: state.objects(Direction::Forward),
        backward: Some(BackwardMotion {
            camera: state.camera(Direction::Backward),
            objects: state.objects(Direction::Backward),
        }),
        intrinsics: Some(*intrinsics),
    };
    io::write_atomic(&out.join("motion.json"), &json_bytes(&motion))?;
    io::write_atomic(&out.join("loss.csv"), trace_csv.as_bytes())?;
    Ok(())
}

pub fn cmd_solve(args: &SolveArgs) -> Result<(), CliError> {
    let cfg = solve_config(args)?;
    let (frame_t, frame_tp1, scene_intrinsics) = load_frames(&cfg)?;
    let intrinsics = match (scene_intrinsics, &cfg.intrinsics, cfg.focal_px) {
        (Some(k), IntrinsicsSetting::Named(_), None) => k,
        _ => cfg.intrinsics(frame_t.width)?,
    };
    let supervision = load_supervision(&cfg, frame_t.width, frame_t.height)?;
    let init = ProblemState::initial(frame_t.width, frame_t.height, cfg.solver.k, cfg.solver.seed);
    let solution =
        optimize(&frame_t, &frame_tp1, &intrinsics, &init, &cfg.solver, Some(&supervision)).map_err(|e| match e {
            crate::solver::SolverError::Config(m) => CliError::Config(m),
            crate::solver::SolverError::Loss(l) => CliError::Config(l.to_string()),
            other => runtime(other),
        })?;
    let out = cfg.out.as_ref().expect("validated");
    write_solution(out, &solution.state, &intrinsics, &solution.trace.to_csv())?;
    let cam = solution.state.camera(Direction::Forward);
    println!(
        "solved {}x{} K={} in {} iterations: loss {:.6} -> {:.6}, camera t = [{:.5}, {:.5}, {:.5}]",
        frame_t.width,
        frame_t.height,
        cfg.solver.k,
        solution.trace.len(),
        solution.trace.total.first().copied().unwrap_or(f64::NAN),
        solution.trace.last().unwrap_or(f64::NAN),
        cam.translation[0],
        cam.translation[1],
        cam.translation[2],
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Writes one scene's frames and ground truth into `dir`.
pub fn write_scene(dir: &Path, gt: &SceneGroundTruth) -> Result<(), CliError> {
    create_dir(dir)?;
    let (w, h) = (gt.spec.width, gt.spec.height);
    io::write_image(&dir.join("frame_t.png"), &gt.frame_t)?;
    io::write_image(&dir.join("frame_tp1.png"), &gt.frame_tp1)?;
    io::write_depth(&dir.join("depth.pfm"), &gt.depth_t, 1.0)?;
    io::write_depth(&dir.join("depth_tp1.pfm"), &gt.depth_tp1, 1.0)?;
    io::write_flo(&dir.join("flow.flo"), &gt.flow)?;
    io::write_image(&dir.join("flow.png"), &io::flow_to_color(&gt.flow))?;
    let as_unit = |m: &[bool]| m.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>();
    for (k, mask) in gt.object_masks().iter().enumerate() {
        io::write_mask(&dir.join(format!("mask_{k}.png")), w, h, &as_unit(mask))?;
    }
    io::write_mask(&dir.join("valid.png"), w, h, &as_unit(&gt.visible()))?;
    let motion = MotionFile {
        camera: gt.camera,
        objects: gt.objects.clone(),
        backward: None,
        intrinsics: Some(gt.spec.intrinsics),
    };
    io::write_atomic(&dir.join("motion.json"), &json_bytes(&motion))?;
    io::write_atomic(&dir.join("scene.json"), &json_bytes(&gt.spec))?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.width < 8 || args.height < 8 {
        return Err(CliError::Config("scenes must be at least 8x8".into()));
    }
    let specs = standard_suite_sized(args.width, args.height);
    specs
        .par_iter()
        .map(|spec| {
            let gt = generate_scene(spec, args.seed).map_err(runtime)?;
            write_scene(&args.out.join(&spec.name), &gt)
        })
        .collect::<Result<Vec<()>, CliError>>()?;
    for spec in &specs {
        println!("wrote {}", args.out.join(&spec.name).display());
    }
    Ok(())
}

fn mask_files(dir: &Path) -> Vec<PathBuf> {
    (0..).map(|k| dir.join(format!("mask_{k}.png"))).take_while(|p| p.is_file()).collect()
}

fn read_motion(path: &Path) -> Result<MotionFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn same_size(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<(), CliError> {
    if a == b {
        Ok(())
    } else {
        Err(runtime(format!("{what}: prediction is {}x{}, ground truth is {}x{}", a.0, a.1, b.0, b.1)))
    }
}

/// Every metric that both directories provide inputs for.
pub fn evaluate_pair(pred: &Path, gt: &Path) -> Result<Vec<(&'static str, f64)>, CliError> {
    let mut out = Vec::new();
    let valid_path = gt.join("valid.png");
    let valid = if valid_path.is_file() { Some(io::read_mask(&valid_path)?.2) } else { None };

    let (pd, gd) = (pred.join("depth.pfm"), gt.join("depth.pfm"));
    if pd.is_file() && gd.is_file() {
        let (d, g): (DepthMap, DepthMap) = (io::read_depth(&pd, 1.0)?, io::read_depth(&gd, 1.0)?);
        same_size("depth", (d.width, d.height), (g.width, g.height))?;
        let mask: Vec<bool> = g.data.iter().zip(&d.data).map(|(&g, &d)| g > 0.0 && d > 0.0).collect();
        out.push(("log_rmse", metrics::scale_invariant_log_rmse(&d, &g, &mask).map_err(runtime)?));
    }

    let (pm, gm) = (pred.join("motion.json"), gt.join("motion.json"));
    if pm.is_file() && gm.is_file() {
        let (p, g) = (read_motion(&pm)?, read_motion(&gm)?);
        let (pr, pt) = effective_pose(&p.camera)?;
        let (gr, gt_t) = effective_pose(&g.camera)?;
        let pred_motion = RigidMotion::new(p.camera.sin_angles, pt.into(), [0.0; 3]);
        debug_assert!((pred_motion.rotation().map_err(runtime)? - pr).norm() < 1e-12);
        let (te, re) = metrics::relative_pose_error(&pred_motion, &gr, &gt_t).map_err(runtime)?;
        out.push(("trans_err", te));
        out.push(("rot_err", re));
    }

    let (pmasks, gmasks) = (mask_files(pred), mask_files(gt));
    if !pmasks.is_empty() && !gmasks.is_empty() {
        let layers: Vec<Vec<f64>> = pmasks
            .iter()
            .map(|p| io::read_image(p).map(|img| img.data.chunks(img.channels).map(|px| px[0]).collect()))
            .collect::<Result<_, _>>()?;
        let first = io::read_image(&pmasks[0])?;
        let stack = MotionMaskStack::from_layers(first.width, first.height, &layers);
        let objects: Vec<Vec<bool>> = gmasks
            .iter()
            .map(|p| {
                let (w, h, m) = io::read_mask(p)?;
                same_size("mask", (first.width, first.height), (w, h))?;
                Ok(m)
            })
            .collect::<Result<_, CliError>>()?;
        out.push(("mask_iou", metrics::mask_iou(&stack, &objects, MASK_THRESHOLD).map_err(runtime)?));
    }

    let (pf, gf) = (pred.join("flow.flo"), gt.join("flow.flo"));
    if pf.is_file() && gf.is_file() {
        let (f, g) = (io::read_flo(&pf)?, io::read_flo(&gf)?);
        same_size("flow", (f.width, f.height), (g.width, g.height))?;
        let mask = valid.clone().unwrap_or_else(|| vec![true; g.u.len()]);
        out.push(("epe", metrics::endpoint_error(&f, &g, &mask).map_err(runtime)?));
    }

    if out.is_empty() {
        return Err(runtime(format!("nothing to compare between {} and {}", pred.display(), gt.display())));
    }
    Ok(out)
}

/// Pair names and directories: matching subdirectories, or the two directories themselves.
fn eval_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    for d in [pred, gt] {
        if !d.is_dir() {
            return Err(CliError::Config(format!("{}: not a directory", d.display())));
        }
    }
    let subdirs = |d: &Path| -> Result<Vec<String>, CliError> {
        let mut names: Vec<String> = std::fs::read_dir(d)
            .map_err(|e| runtime(format!("{}: {e}", d.display())))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        Ok(names)
    };
    let gt_names = subdirs(gt)?;
    let pred_names = subdirs(pred)?;
    let shared: Vec<String> = gt_names.into_iter().filter(|n| pred_names.contains(n)).collect();
    if shared.is_empty() {
        let name = pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "pair".into());
        return Ok(vec![(name, pred.to_path_buf(), gt.to_path_buf())]);
    }
    Ok(shared.into_iter().map(|n| (n.clone(), pred.join(&n), gt.join(&n))).collect())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let pairs = eval_pairs(&args.pred, &args.gt)?;
    let results: Vec<(String, Vec<(&'static str, f64)>)> = pairs
        .par_iter()
        .map(|(name, p, g)| evaluate_pair(p, g).map(|m| (name.clone(), m)))
        .collect::<Result<_, _>>()?;
    let mut report = EvalReport::new();
    for (name, metrics) in &results {
        for (metric, v) in metrics {
            report.insert(name, metric, *v).map_err(runtime)?;
        }
    }
    let out = args.out.as_ref().unwrap_or(&args.pred);
    create_dir(out)?;
    let text = report.to_key_value();
    io::write_atomic(&out.join("report.txt"), text.as_bytes())?;
    let mut json = report.to_json();
    json.push('\n');
    io::write_atomic(&out.join("report.json"), json.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    if args.size < 4 || args.problems == 0 || args.points == 0 {
        return Err(CliError::Config("size must be ≥ 4 and counts positive".into()));
    }
    let config = SuiteConfig { primitive_points: args.points, problems: args.problems, size: args.size, k: args.k };
    let report = run_suite(args.seed, &config).map_err(runtime)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(runtime("gradient check failed"))
    }
}
