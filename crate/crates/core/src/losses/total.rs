//! Weighted combination of every objective, built as one differentiable graph
//! over the free variables of a frame pair.
//!
//! Free variables are named as follows (`dir` is `fwd` for t→t+1 and `bwd`
//! for t+1→t):
//!
//! | name | shape | meaning |
//! |---|---|---|
//! | `depth_t`, `depth_tp1` | `[h, w]` | depth pre-activations |
//! | `mask_t`, `mask_tp1` | `[h, w, K]` | mask logits (absent when `K = 0`) |
//! | `cam_<dir>.angles` | `[3]` | unconstrained Euler sines |
//! | `cam_<dir>.trans`, `cam_<dir>.pivot` | `[3]` | translation and pivot |
//! | `obj_<dir>.angles/.trans/.pivot` | `[K, 3]` | object motions |
//!
//! A variable missing from the differentiated set is read from
//! [`LossSetup::fixed`] as a constant; a missing pivot defaults to zero.

use nalgebra::{Matrix3, Vector3};

use super::{DepthSupervision, LossError, LossWeights};
use crate::autodiff::{
    AutodiffError, Channel, ChannelReduce, Element, Graph, Leaves, LossFn, MaskedL1, NamedTensors, Normalization, Sub,
    Tanh, Tensor, Var, WeightedSum,
};
use crate::geometry::ops::{Backproject, ObjectMotion, ProjectFlow, RigidTransform, RotationFromSines};
use crate::geometry::Z_MIN;
use crate::losses::ops::{FirstOrderSmoothness, PoseError, SecondOrderSmoothness};
use crate::solver::ops::{DepthActivation, MaskActivation};
use crate::types::{CameraIntrinsics, FlowField, Image};
use crate::warping::{flow_validity, BilinearSample};

/// One weighted objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Color,
    FlowSmooth,
    MaskSmooth,
    DepthSmooth,
    ForwardBackward,
    DepthSup,
    PoseTrans,
    PoseRot,
    FlowSup,
}

impl Term {
    pub const ALL: [Term; 9] = [
        Term::Color,
        Term::FlowSmooth,
        Term::MaskSmooth,
        Term::DepthSmooth,
        Term::ForwardBackward,
        Term::DepthSup,
        Term::PoseTrans,
        Term::PoseRot,
        Term::FlowSup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Color => "color",
            Term::FlowSmooth => "flow_smooth",
            Term::MaskSmooth => "mask_smooth",
            Term::DepthSmooth => "depth_smooth",
            Term::ForwardBackward => "fb",
            Term::DepthSup => "depth_sup",
            Term::PoseTrans => "pose_trans",
            Term::PoseRot => "pose_rot",
            Term::FlowSup => "flow_sup",
        }
    }

    /// Key of the matching field in [`LossWeights`].
    pub fn weight_key(self) -> String {
        format!("w_{}", self.name())
    }

    pub fn from_name(name: &str) -> Option<Term> {
        let name = name.strip_prefix("w_").unwrap_or(name);
        Term::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Term::DepthSup | Term::PoseTrans | Term::PoseRot | Term::FlowSup)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Reference frame t, target frame t+1.
    Forward,
    /// Reference frame t+1, target frame t.
    Backward,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }

    fn frames(self) -> (&'static str, &'static str) {
        match self {
            Direction::Forward => ("t", "tp1"),
            Direction::Backward => ("tp1", "t"),
        }
    }
}

/// Names and shapes of the free variables of an `h×w` problem with `k` objects.
pub fn param_names(
    height: usize,
    width: usize,
    k: usize,
    symmetric: bool,
    freeze_pivots: bool,
) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![("depth_t".to_string(), vec![height, width]), ("depth_tp1".to_string(), vec![height, width])];
    if k > 0 {
        out.push(("mask_t".into(), vec![height, width, k]));
        out.push(("mask_tp1".into(), vec![height, width, k]));
    }
    let dirs: &[Direction] = if symmetric { &[Direction::Forward, Direction::Backward] } else { &[Direction::Forward] };
    for dir in dirs {
        let mut motion = |prefix: &str, shape: Vec<usize>| {
            out.push((format!("{prefix}_{}.angles", dir.tag()), shape.clone()));
            out.push((format!("{prefix}_{}.trans", dir.tag()), shape.clone()));
            if !freeze_pivots {
                out.push((format!("{prefix}_{}.pivot", dir.tag()), shape));
            }
        };
        motion("cam", vec![3]);
        if k > 0 {
            motion("obj", vec![k, 3]);
        }
    }
    out
}

/// The observed frame pair and the camera model.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub frame_t: Image,
    pub frame_tp1: Image,
    pub intrinsics: CameraIntrinsics,
}

impl Observations {
    fn frame(&self, which: &str) -> &Image {
        if which == "t" {
            &self.frame_t
        } else {
            &self.frame_tp1
        }
    }
}

/// Optional ground truth. Pose and flow refer to the t→t+1 direction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Supervision {
    pub depth_t: Option<DepthSupervision>,
    pub depth_tp1: Option<DepthSupervision>,
    pub camera_pose: Option<(Matrix3<f64>, Vector3<f64>)>,
    pub flow: Option<FlowField>,
}

/// Which supervised objectives the caller insists on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SupervisedTerms {
    pub depth: bool,
    pub pose: bool,
    pub flow: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub k: usize,
    /// Evaluate the inverted pair as well and add its terms.
    pub symmetric: bool,
    /// Logit multiplier applied before the mask sigmoid.
    pub mask_multiplier: f64,
    pub required: SupervisedTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            k: 3,
            symmetric: true,
            mask_multiplier: 1.0,
            required: SupervisedTerms::default(),
        }
    }
}

/// Everything needed to build the total loss for one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSetup {
    pub observations: Observations,
    pub supervision: Supervision,
    pub config: LossConfig,
    /// Constant values for variables that are not being differentiated.
    pub fixed: NamedTensors,
}

/// Per-term graph nodes, each summed over directions, plus the weighted total.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Var,
    pub terms: Vec<(Term, Var)>,
    pub diagnostics: LossDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossDiagnostics {
    /// Valid warped samples per direction.
    pub valid_pixels: Vec<usize>,
    /// Points whose depth was clamped before projection, over all directions.
    pub clamped_points: usize,
}

impl LossDiagnostics {
    /// Some direction had no valid warped sample; its warping terms read 0.
    pub fn degenerate(&self) -> bool {
        self.valid_pixels.contains(&0)
    }
}

struct DirectionGraph {
    depth: Var,
    masks: Option<Var>,
    cam_rotation: Var,
    cam_translation: Var,
    points: Var,
    flow: Var,
}

impl LossSetup {
    pub fn new(observations: Observations, supervision: Supervision, config: LossConfig) -> Result<Self, LossError> {
        let setup = Self { observations, supervision, config, fixed: NamedTensors::new() };
        setup.validate()?;
        Ok(setup)
    }

    pub fn width(&self) -> usize {
        self.observations.frame_t.width
    }

    pub fn height(&self) -> usize {
        self.observations.frame_t.height
    }

    pub fn validate(&self) -> Result<(), LossError> {
        self.config.weights.validate()?;
        let (ft, fp) = (&self.observations.frame_t, &self.observations.frame_tp1);
        if (ft.width, ft.height, ft.channels) != (fp.width, fp.height, fp.channels) {
            return Err(LossError::Shape("frames differ in size or channel count".into()));
        }
        if ft.width == 0 || ft.height == 0 {
            return Err(LossError::Shape("empty frames".into()));
        }
        if !(self.config.mask_multiplier.is_finite() && self.config.mask_multiplier > 0.0) {
            return Err(LossError::InvalidWeights("mask multiplier must be positive".into()));
        }
        let sup = &self.supervision;
        let req = self.config.required;
        if req.depth && sup.depth_t.is_none() && sup.depth_tp1.is_none() {
            return Err(LossError::MissingGroundTruth("depth"));
        }
        if req.pose && sup.camera_pose.is_none() {
            return Err(LossError::MissingGroundTruth("pose"));
        }
        if req.flow && sup.flow.is_none() {
            return Err(LossError::MissingGroundTruth("flow"));
        }
        let dims = (ft.width, ft.height);
        for d in [&sup.depth_t, &sup.depth_tp1].into_iter().flatten() {
            if (d.depth.width, d.depth.height) != dims || d.mask.len() != dims.0 * dims.1 {
                return Err(LossError::Shape("depth ground truth does not match the frames".into()));
            }
        }
        if let Some(f) = &sup.flow {
            if (f.width, f.height) != dims {
                return Err(LossError::Shape("flow ground truth does not match the frames".into()));
            }
        }
        Ok(())
    }

    /// Names and shapes of the free variables this setup reads.
    pub fn param_names(&self, freeze_pivots: bool) -> Vec<(String, Vec<usize>)> {
        param_names(self.height(), self.width(), self.config.k, self.config.symmetric, freeze_pivots)
    }

    fn active(&self, term: Term) -> bool {
        let sup = &self.supervision;
        let present = match term {
            Term::DepthSup => sup.depth_t.is_some() || sup.depth_tp1.is_some(),
            Term::PoseTrans | Term::PoseRot => sup.camera_pose.is_some(),
            Term::FlowSup => sup.flow.is_some(),
            Term::MaskSmooth => self.config.k > 0,
            _ => true,
        };
        present && self.config.weights.get(term) > 0.0
    }

    /// Terms that contribute to the total.
    pub fn active_terms(&self) -> Vec<Term> {
        Term::ALL.into_iter().filter(|&t| self.active(t)).collect()
    }

    pub fn with_fixed(mut self, fixed: NamedTensors) -> Self {
        self.fixed = fixed;
        self
    }

    fn lookup(
        &self,
        graph: &mut Graph<'_>,
        leaves: &Leaves,
        name: &str,
        shape: &[usize],
    ) -> Result<Var, AutodiffError> {
        if let Some(v) = leaves.try_get(name) {
            return Ok(v);
        }
        match self.fixed.get(name) {
            Some(t) => Ok(graph.constant(t.clone())),
            None if name.ends_with(".pivot") => Ok(graph.constant(Tensor::zeros(shape))),
            None => Err(AutodiffError::UnknownParameter(name.to_string())),
        }
    }

    fn build_direction(
        &self,
        graph: &mut Graph<'_>,
        leaves: &Leaves,
        dir: Direction,
        depths: &[(String, Var)],
    ) -> Result<DirectionGraph, AutodiffError> {
        let (ref_frame, _) = dir.frames();
        let k = self.config.k;
        let intr = self.observations.intrinsics;
        let depth = depths.iter().find(|(n, _)| n == ref_frame).map(|(_, v)| *v).expect("both depths built");
        let mut points = graph.apply(Backproject(intr), &[depth])?;

        let mut masks = None;
        if k > 0 {
            let logits = self.lookup(graph, leaves, &format!("mask_{ref_frame}"), &[])?;
            let m = graph.apply(MaskActivation { multiplier: self.config.mask_multiplier }, &[logits])?;
            let prefix = format!("obj_{}", dir.tag());
            let angles = self.lookup(graph, leaves, &format!("{prefix}.angles"), &[k, 3])?;
            let trans = self.lookup(graph, leaves, &format!("{prefix}.trans"), &[k, 3])?;
            let pivot = self.lookup(graph, leaves, &format!("{prefix}.pivot"), &[k, 3])?;
            let sines = graph.apply(Tanh, &[angles])?;
            let rot = graph.apply(RotationFromSines, &[sines])?;
            points = graph.apply(ObjectMotion, &[points, m, rot, trans, pivot])?;
            masks = Some(m);
        }

        let prefix = format!("cam_{}", dir.tag());
        let angles = self.lookup(graph, leaves, &format!("{prefix}.angles"), &[3])?;
        let cam_translation = self.lookup(graph, leaves, &format!("{prefix}.trans"), &[3])?;
        let pivot = self.lookup(graph, leaves, &format!("{prefix}.pivot"), &[3])?;
        let sines = graph.apply(Tanh, &[angles])?;
        let cam_rotation = graph.apply(RotationFromSines, &[sines])?;
        points = graph.apply(RigidTransform, &[points, cam_rotation, cam_translation, pivot])?;
        let flow = graph.apply(ProjectFlow(intr), &[points])?;
        Ok(DirectionGraph { depth, masks, cam_rotation, cam_translation, points, flow })
    }

    /// Appends the total loss to `graph`.
    pub fn build(&self, graph: &mut Graph<'_>, leaves: &Leaves) -> Result<TotalLoss, AutodiffError> {
        let mut depths = Vec::with_capacity(2);
        for frame in ["t", "tp1"] {
            let raw = self.lookup(graph, leaves, &format!("depth_{frame}"), &[])?;
            depths.push((frame.to_string(), graph.apply(DepthActivation, &[raw])?));
        }
        let dirs: &[Direction] =
            if self.config.symmetric { &[Direction::Forward, Direction::Backward] } else { &[Direction::Forward] };

        let mut per_term: Vec<(Term, Vec<Var>)> = self.active_terms().into_iter().map(|t| (t, Vec::new())).collect();
        let mut push = |term: Term, v: Var| {
            if let Some((_, list)) = per_term.iter_mut().find(|(t, _)| *t == term) {
                list.push(v);
            }
        };
        let mut diagnostics = LossDiagnostics::default();

        for &dir in dirs {
            let (ref_frame, target_frame) = dir.frames();
            let g = self.build_direction(graph, leaves, dir, &depths)?;
            let valid = flow_validity(graph.value(g.flow));
            diagnostics.valid_pixels.push(valid.iter().filter(|&&v| v).count());
            diagnostics.clamped_points += graph.value(g.points).data().chunks(3).filter(|p| p[2] < Z_MIN).count();

            if self.active(Term::Color) {
                let reference = graph.constant(self.observations.frame(ref_frame).to_tensor());
                let target = graph.constant(self.observations.frame(target_frame).to_tensor());
                let warped = graph.apply(BilinearSample, &[target, g.flow])?;
                let diff = graph.apply(Sub, &[reference, warped])?;
                push(Term::Color, graph.apply(MaskedL1::valid_mean(valid.clone()), &[diff])?);
            }
            if self.active(Term::ForwardBackward) {
                let other = depths.iter().find(|(n, _)| n == target_frame).map(|(_, v)| *v).expect("both depths built");
                // d + W equals the transformed Z.
                let advanced = graph.apply(Channel(2), &[g.points])?;
                let sampled = graph.apply(BilinearSample, &[other, g.flow])?;
                let diff = graph.apply(Sub, &[advanced, sampled])?;
                push(Term::ForwardBackward, graph.apply(MaskedL1::valid_mean(valid), &[diff])?);
            }
            if self.active(Term::FlowSmooth) {
                push(Term::FlowSmooth, graph.apply(FirstOrderSmoothness, &[g.flow])?);
            }
            if let (true, Some(m)) = (self.active(Term::MaskSmooth), g.masks) {
                push(Term::MaskSmooth, graph.apply(FirstOrderSmoothness, &[m])?);
            }
            if self.active(Term::DepthSmooth) {
                push(Term::DepthSmooth, graph.apply(SecondOrderSmoothness, &[g.depth])?);
            }
            if self.active(Term::DepthSup) {
                let sup = match dir {
                    Direction::Forward => &self.supervision.depth_t,
                    Direction::Backward => &self.supervision.depth_tp1,
                };
                if let Some(sup) = sup {
                    let gt = graph.constant(sup.depth.to_tensor());
                    let diff = graph.apply(Sub, &[g.depth, gt])?;
                    let op = MaskedL1 {
                        mask: Some(sup.mask.clone()),
                        channels: ChannelReduce::Sum,
                        normalization: Normalization::AllPixels,
                    };
                    push(Term::DepthSup, graph.apply(op, &[diff])?);
                }
            }
            if dir == Direction::Forward {
                if let Some((gt_rotation, gt_translation)) = self.supervision.camera_pose {
                    if self.active(Term::PoseTrans) || self.active(Term::PoseRot) {
                        let op = PoseError { gt_rotation, gt_translation };
                        let errs = graph.apply(op, &[g.cam_rotation, g.cam_translation])?;
                        if self.active(Term::PoseTrans) {
                            push(Term::PoseTrans, graph.apply(Element(0), &[errs])?);
                        }
                        if self.active(Term::PoseRot) {
                            push(Term::PoseRot, graph.apply(Element(1), &[errs])?);
                        }
                    }
                }
                if let (true, Some(gt)) = (self.active(Term::FlowSup), &self.supervision.flow) {
                    let gt = graph.constant(gt.uv_tensor());
                    let diff = graph.apply(Sub, &[g.flow, gt])?;
                    let op =
                        MaskedL1 { mask: None, channels: ChannelReduce::Sum, normalization: Normalization::AllPixels };
                    push(Term::FlowSup, graph.apply(op, &[diff])?);
                }
            }
        }

        let mut terms = Vec::with_capacity(per_term.len());
        for (term, parts) in per_term {
            if parts.is_empty() {
                continue;
            }
            let summed = graph.apply(WeightedSum(vec![1.0; parts.len()]), &parts)?;
            terms.push((term, summed));
        }
        let weights = terms.iter().map(|(t, _)| self.config.weights.get(*t)).collect();
        let vars: Vec<Var> = terms.iter().map(|(_, v)| *v).collect();
        let total = graph.apply(WeightedSum(weights), &vars)?;
        Ok(TotalLoss { total, terms, diagnostics })
    }
}

impl LossFn for LossSetup {
    fn build(&self, graph: &mut Graph<'_>, leaves: &Leaves) -> Result<Var, AutodiffError> {
        Ok(LossSetup::build(self, graph, leaves)?.total)
    }
}

/// Builds the total loss of `setup` into `graph`.
pub fn build_total_loss(setup: &LossSetup, graph: &mut Graph<'_>, leaves: &Leaves) -> Result<TotalLoss, AutodiffError> {
    setup.build(graph, leaves)
}
