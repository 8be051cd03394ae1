//! Direct optimization of depth, masks and motions for one frame pair.

pub mod ops;
mod pyramid;

pub use pyramid::{downsample_depth_supervision, downsample_flow, downsample_grid, downsample_image, upsample_grid};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    value_and_grad_with, AutodiffError, Gradient, Graph, Leaves, LossFn, NamedTensors, ParamSet, PrimitiveRegistry,
    Tensor, Var,
};
use crate::geometry::{compute_flow, GeometryError};
use crate::losses::{
    param_names, Direction, LossConfig, LossError, LossSetup, LossWeights, Observations, SupervisedTerms, Supervision,
    Term,
};
use crate::types::{CameraIntrinsics, DepthMap, FlowField, Image, MotionMaskStack, RigidMotion};
use ops::{sigmoid, softplus, MAX_DEPTH};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite value at iteration {iteration} in `{term}`")]
    NonFinite { iteration: usize, term: String },
    #[error("iteration {iteration}: {source}")]
    Autodiff {
        iteration: usize,
        #[source]
        source: AutodiffError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// `min(1 + softplus(u), 100)`.
pub fn constrain_depth_value(u: f64) -> f64 {
    (1.0 + softplus(u)).min(MAX_DEPTH)
}

/// Inverse of [`constrain_depth_value`] on `(1, 100)`.
pub fn unconstrain_depth_value(d: f64) -> f64 {
    let excess = (d - 1.0).clamp(1e-12, MAX_DEPTH - 1.0);
    // softplus⁻¹(y) = ln(eʸ − 1) = y + ln(1 − e⁻ʸ)
    excess + (-(-excess).exp()).ln_1p()
}

pub fn constrain_depth(raw: &Tensor) -> DepthMap {
    DepthMap::from_tensor(&raw.map(constrain_depth_value))
}

pub fn constrain_sin(v: f64) -> f64 {
    v.tanh()
}

/// Logit multiplier `min(1 + step·rate, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSchedule {
    pub rate: f64,
    pub max: f64,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self { rate: 1e-3, max: 10.0 }
    }
}

impl MaskSchedule {
    pub fn multiplier(&self, step: usize) -> f64 {
        (1.0 + step as f64 * self.rate).min(self.max).max(1.0)
    }
}

/// `sigmoid(multiplier(step)·logit)` for an `[h, w, K]` logit stack.
pub fn sharpen_masks(logits: &Tensor, step: usize, schedule: &MaskSchedule) -> MotionMaskStack {
    let m = schedule.multiplier(step);
    MotionMaskStack::from_tensor(&logits.map(|x| sigmoid(m * x)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate at the last iteration as a fraction of the initial one
    /// (cosine decay); 1 keeps it constant.
    pub final_lr_fraction: f64,
    /// Per-group multipliers on the learning rate.
    pub depth_lr_scale: f64,
    pub mask_lr_scale: f64,
    pub motion_lr_scale: f64,
    pub mask_schedule: MaskSchedule,
    pub seed: u64,
    pub k: usize,
    pub weights: LossWeights,
    pub freeze_pivots: bool,
    /// Also fit the inverted pair.
    pub symmetric: bool,
    /// Number of pyramid levels; 1 is single-scale.
    pub pyramid_levels: usize,
    #[serde(skip)]
    pub required: SupervisedTerms,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            final_lr_fraction: 0.05,
            depth_lr_scale: 1.0,
            mask_lr_scale: 2.5,
            motion_lr_scale: 0.5,
            mask_schedule: MaskSchedule::default(),
            seed: 0,
            k: 3,
            weights: LossWeights::default(),
            freeze_pivots: true,
            symmetric: true,
            pyramid_levels: 1,
            required: SupervisedTerms::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must lie in (0, 1]");
        }
        for s in [self.depth_lr_scale, self.mask_lr_scale, self.motion_lr_scale] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("learning-rate scales must be nonnegative");
            }
        }
        if !(self.mask_schedule.rate >= 0.0 && self.mask_schedule.max >= 1.0) {
            return bad("mask schedule must be nondecreasing with multiplier ≥ 1");
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be at least 1");
        }
        self.weights.validate()?;
        Ok(())
    }

    fn lr_scale(&self, name: &str) -> f64 {
        if name.starts_with("depth") {
            self.depth_lr_scale
        } else if name.starts_with("mask") {
            self.mask_lr_scale
        } else {
            self.motion_lr_scale
        }
    }

    /// Cosine interpolation from the initial to the final rate.
    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.learning_rate;
        }
        let progress = step as f64 / (total - 1) as f64;
        let fraction = self.final_lr_fraction
            + (1.0 - self.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * fraction
    }
}

/// Free variables of a frame pair: depth pre-activations, mask logits and
/// raw motion parameters for both directions, named as in [`crate::losses`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemState {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    /// Logit multiplier in effect when the state was produced.
    pub mask_multiplier: f64,
    pub values: ParamSet,
}

impl ProblemState {
    /// Every variable zero except depth, which is set to `depth` everywhere.
    pub fn constant(width: usize, height: usize, k: usize, depth: f64) -> Self {
        let mut values = NamedTensors::new();
        for (name, shape) in param_names(height, width, k, true, false) {
            let t = if name.starts_with("depth") {
                Tensor::filled(&shape, unconstrain_depth_value(depth))
            } else {
                Tensor::zeros(&shape)
            };
            values.insert(name, t);
        }
        Self { width, height, k, mask_multiplier: 1.0, values }
    }

    /// Depth ≈ 2, zero motions, mask logits drawn from `N(0, 0.1²)`.
    pub fn initial(width: usize, height: usize, k: usize, seed: u64) -> Self {
        let mut state = Self::constant(width, height, k, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid distribution");
        for (name, t) in state.values.iter_mut() {
            if name.starts_with("mask") {
                t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        state
    }

    fn tensor(&self, name: &str) -> &Tensor {
        self.values.get(name).expect("state holds every variable")
    }

    fn frame_tag(frame: Frame) -> &'static str {
        match frame {
            Frame::T => "t",
            Frame::Tp1 => "tp1",
        }
    }

    pub fn depth(&self, frame: Frame) -> DepthMap {
        constrain_depth(self.tensor(&format!("depth_{}", Self::frame_tag(frame))))
    }

    /// Soft masks at the stored multiplier.
    pub fn masks(&self, frame: Frame) -> MotionMaskStack {
        if self.k == 0 {
            return MotionMaskStack::zeros(self.width, self.height, 0);
        }
        let m = self.mask_multiplier;
        MotionMaskStack::from_tensor(&self.tensor(&format!("mask_{}", Self::frame_tag(frame))).map(|x| sigmoid(m * x)))
    }

    fn motion(&self, prefix: &str, index: usize) -> RigidMotion {
        let get = |field: &str| {
            let d = self.tensor(&format!("{prefix}.{field}")).data();
            [d[3 * index], d[3 * index + 1], d[3 * index + 2]]
        };
        RigidMotion::new(get("angles").map(constrain_sin), get("trans"), get("pivot"))
    }

    pub fn camera(&self, dir: Direction) -> RigidMotion {
        self.motion(&format!("cam_{}", dir.tag()), 0)
    }

    pub fn objects(&self, dir: Direction) -> Vec<RigidMotion> {
        (0..self.k).map(|i| self.motion(&format!("obj_{}", dir.tag()), i)).collect()
    }

    /// Composed flow from the reference frame of `dir`.
    pub fn flow(&self, dir: Direction, intrinsics: &CameraIntrinsics) -> Result<FlowField, GeometryError> {
        let frame = match dir {
            Direction::Forward => Frame::T,
            Direction::Backward => Frame::Tp1,
        };
        compute_flow(&self.depth(frame), &self.masks(frame), &self.objects(dir), &self.camera(dir), intrinsics)
    }

    /// Splits into differentiated variables and fixed constants.
    pub fn partition(&self, freeze_pivots: bool, symmetric: bool) -> (ParamSet, NamedTensors) {
        let wanted = param_names(self.height, self.width, self.k, symmetric, freeze_pivots);
        let mut free = NamedTensors::new();
        let mut fixed = NamedTensors::new();
        for (name, t) in self.values.iter() {
            if wanted.iter().any(|(n, _)| n == name) {
                free.insert(name, t.clone());
            } else {
                fixed.insert(name, t.clone());
            }
        }
        (free, fixed)
    }

    /// Writes back every entry of `params` by name.
    pub fn absorb(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.values.set(name, t.clone()).expect("parameter shapes are fixed for a problem");
        }
    }

    /// Same variables on a grid of half the size (rounded down, at least 1).
    pub fn downsampled(&self) -> Self {
        let (w, h) = ((self.width / 2).max(1), (self.height / 2).max(1));
        self.resampled(w, h, |t| downsample_grid(t, w, h))
    }

    /// Same variables on a `width×height` grid by nearest-neighbor upsampling.
    pub fn upsampled(&self, width: usize, height: usize) -> Self {
        self.resampled(width, height, |t| upsample_grid(t, width, height))
    }

    fn resampled(&self, width: usize, height: usize, f: impl Fn(&Tensor) -> Tensor) -> Self {
        let mut values = NamedTensors::new();
        for (name, t) in self.values.iter() {
            let is_grid = name.starts_with("depth") || name.starts_with("mask");
            values.insert(name, if is_grid { f(t) } else { t.clone() });
        }
        Self { width, height, k: self.k, mask_multiplier: self.mask_multiplier, values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    T,
    Tp1,
}

/// Total loss and per-term values at every iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub total: Vec<f64>,
    pub terms: Vec<(Term, Vec<f64>)>,
}

impl LossTrace {
    fn record(&mut self, total: f64, terms: &[(Term, f64)]) {
        self.total.push(total);
        for &(term, value) in terms {
            match self.terms.iter_mut().find(|(t, _)| *t == term) {
                Some((_, series)) => series.push(value),
                None => self.terms.push((term, vec![value])),
            }
        }
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    /// Loss before the final update, if any iteration ran.
    pub fn last(&self) -> Option<f64> {
        self.total.last().copied()
    }

    /// CSV with one row per iteration: `iteration,total,<term>...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,total");
        for (t, _) in &self.terms {
            out.push(',');
            out.push_str(t.name());
        }
        out.push('\n');
        for (i, total) in self.total.iter().enumerate() {
            out.push_str(&format!("{i},{total:.17e}"));
            for (_, series) in &self.terms {
                match series.get(i) {
                    Some(v) => out.push_str(&format!(",{v:.17e}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub state: ProblemState,
    pub trace: LossTrace,
}

/// First-order moment-based optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { beta1, beta2, epsilon, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// One update of `params` along `grad`; `lr` gives the step size per entry.
    pub fn step(&mut self, params: &mut ParamSet, grad: &Gradient, lr: impl Fn(&str) -> f64) {
        debug_assert!(params.is_congruent(grad));
        let n = params.num_scalars();
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut offset = 0;
        for ((name, p), (_, g)) in params.iter_mut().zip(grad.iter()) {
            let rate = lr(name);
            for (x, gi) in p.data_mut().iter_mut().zip(g.data()) {
                let m = &mut self.m[offset];
                let v = &mut self.v[offset];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *x -= rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
                offset += 1;
            }
        }
    }
}

/// Runs Adam on an arbitrary differentiable loss; returns the final
/// parameters and the loss before each update.
pub fn minimize<L: LossFn + ?Sized>(
    registry: &PrimitiveRegistry,
    loss_fn: &L,
    init: &ParamSet,
    iterations: usize,
    learning_rate: f64,
) -> Result<(ParamSet, Vec<f64>), SolverError> {
    let mut params = init.clone();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let mut trace = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        let (value, grad, ()) = value_and_grad_with(registry, &params, |g, l| Ok((loss_fn.build(g, l)?, ())))
            .map_err(|e| autodiff_error(iteration, e))?;
        trace.push(value);
        adam.step(&mut params, &grad, |_| learning_rate);
    }
    Ok((params, trace))
}

fn autodiff_error(iteration: usize, e: AutodiffError) -> SolverError {
    match e {
        AutodiffError::NonFinite { primitive, .. } => SolverError::NonFinite { iteration, term: primitive },
        source => SolverError::Autodiff { iteration, source },
    }
}

fn build_with_terms(
    setup: &LossSetup,
    graph: &mut Graph<'_>,
    leaves: &Leaves,
) -> Result<(Var, Vec<(Term, f64)>), AutodiffError> {
    let total = setup.build(graph, leaves)?;
    let terms = total.terms.iter().map(|(t, v)| (*t, graph.value(*v).item())).collect();
    Ok((total.total, terms))
}

/// Fits a [`ProblemState`] to a frame pair by minimizing the total loss.
pub fn optimize(
    frame_t: &Image,
    frame_tp1: &Image,
    intrinsics: &CameraIntrinsics,
    init: &ProblemState,
    config: &SolverConfig,
    supervision: Option<&Supervision>,
) -> Result<Solution, SolverError> {
    config.validate()?;
    if (init.width, init.height) != (frame_t.width, frame_t.height) || init.k != config.k {
        return Err(SolverError::Config(format!(
            "initial state {}x{} with K={} does not match frames {}x{} with K={}",
            init.width, init.height, init.k, frame_t.width, frame_t.height, config.k
        )));
    }
    let supervision = supervision.cloned().unwrap_or_default();
    let loss_config = LossConfig {
        weights: config.weights,
        k: config.k,
        symmetric: config.symmetric,
        mask_multiplier: 1.0,
        required: config.required,
    };
    let observations = Observations { frame_t: frame_t.clone(), frame_tp1: frame_tp1.clone(), intrinsics: *intrinsics };
    // Validates shapes and requested supervision at full resolution.
    let full = LossSetup::new(observations, supervision, loss_config)?;

    let mut levels = vec![full];
    while levels.len() < config.pyramid_levels {
        let prev = levels.last().expect("nonempty");
        if prev.width() < 8 || prev.height() < 8 {
            break;
        }
        levels.push(downsample_setup(prev));
    }
    levels.reverse();

    let mut states = vec![init.clone()];
    for _ in 1..levels.len() {
        let next = states.last().expect("nonempty").downsampled();
        states.push(next);
    }
    let mut state = states.pop().expect("nonempty");

    let registry = PrimitiveRegistry::standard();
    let mut trace = LossTrace::default();
    let per_level = split_iterations(config.iterations, levels.len());
    let mut step = 0;
    for (level, (mut setup, iterations)) in levels.into_iter().zip(per_level).enumerate() {
        if level > 0 {
            state = state.upsampled(setup.width(), setup.height());
        }
        let (mut params, fixed) = state.partition(config.freeze_pivots, config.symmetric);
        setup.fixed = fixed;
        let mut adam = Adam::new(config.beta1, config.beta2, config.epsilon);
        for _ in 0..iterations {
            setup.config.mask_multiplier = config.mask_schedule.multiplier(step);
            let (value, grad, terms) = value_and_grad_with(&registry, &params, |g, l| build_with_terms(&setup, g, l))
                .map_err(|e| autodiff_error(step, e))?;
            if !value.is_finite() {
                return Err(SolverError::NonFinite { iteration: step, term: "total".into() });
            }
            trace.record(value, &terms);
            let lr = config.lr_at(step, config.iterations);
            adam.step(&mut params, &grad, |name| lr * config.lr_scale(name));
            if !params.is_finite() {
                return Err(SolverError::NonFinite { iteration: step, term: "parameter update".into() });
            }
            step += 1;
        }
        state.absorb(&params);
        state.mask_multiplier = setup.config.mask_multiplier;
    }
    if config.iterations > 0 {
        state.mask_multiplier = config.mask_schedule.multiplier(config.iterations - 1);
    }
    Ok(Solution { state, trace })
}

/// Coarser levels get an equal share; the finest level takes the remainder.
fn split_iterations(total: usize, levels: usize) -> Vec<usize> {
    let share = total / levels;
    let mut out = vec![share; levels];
    out[levels - 1] = total - share * (levels - 1);
    out
}

fn downsample_setup(setup: &LossSetup) -> LossSetup {
    let (w, h) = ((setup.width() / 2).max(1), (setup.height() / 2).max(1));
    let obs = &setup.observations;
    let sup = &setup.supervision;
    LossSetup {
        observations: Observations {
            frame_t: downsample_image(&obs.frame_t, w, h),
            frame_tp1: downsample_image(&obs.frame_tp1, w, h),
            intrinsics: obs.intrinsics,
        },
        supervision: Supervision {
            depth_t: sup.depth_t.as_ref().map(|d| downsample_depth_supervision(d, w, h)),
            depth_tp1: sup.depth_tp1.as_ref().map(|d| downsample_depth_supervision(d, w, h)),
            camera_pose: sup.camera_pose,
            flow: sup.flow.as_ref().map(|f| downsample_flow(f, w, h)),
        },
        config: setup.config,
        fixed: NamedTensors::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::SumSquares;

    #[test]
    fn depth_constraint_cases() {
        assert!((constrain_depth_value(0.0) - (1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((constrain_depth_value(-50.0) - 1.0).abs() < 1e-15);
        assert_eq!(constrain_depth_value(1e6), 100.0);
        for d in [1.5, 2.0, 7.0, 42.0] {
            assert!((constrain_depth_value(unconstrain_depth_value(d)) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn sin_constraint_cases() {
        assert_eq!(constrain_sin(0.0), 0.0);
        assert_eq!(constrain_sin(1e3), 1.0);
        assert_eq!(constrain_sin(-0.3), -constrain_sin(0.3));
    }

    #[test]
    fn mask_sharpening_cases() {
        let schedule = MaskSchedule::default();
        let zero = sharpen_masks(&Tensor::zeros(&[2, 2, 1]), 5000, &schedule);
        assert!(zero.data.iter().all(|&m| m == 0.5));
        let big = sharpen_masks(&Tensor::filled(&[1, 1, 1], 40.0), 0, &schedule);
        assert!(big.data[0] > 1.0 - 1e-12);
        let logit = Tensor::filled(&[1, 1, 1], 0.3);
        let early = sharpen_masks(&logit, 10, &schedule).data[0];
        let late = sharpen_masks(&logit, 2000, &schedule).data[0];
        assert!(late > early);
        assert_eq!(schedule.multiplier(10_000_000), 10.0);
    }

    #[test]
    fn zero_iterations_returns_init() {
        let img = Image::filled(8, 8, 3, 0.5);
        let init = ProblemState::initial(8, 8, 3, 1);
        let config = SolverConfig { iterations: 0, ..SolverConfig::default() };
        let sol = optimize(&img, &img, &CameraIntrinsics::default(), &init, &config, None).unwrap();
        assert_eq!(sol.state, init);
        assert!(sol.trace.is_empty());
    }

    #[test]
    fn convex_bowl_converges() {
        let registry = PrimitiveRegistry::standard();
        let loss = |g: &mut Graph<'_>, l: &Leaves| g.apply(SumSquares, &[l.get("x")?]);
        let init = NamedTensors::new().with("x", Tensor::from_slice(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let (params, trace) = minimize(&registry, &loss, &init, 500, 0.1).unwrap();
        let end: f64 = params.flatten().iter().map(|v| v * v).sum();
        assert!(end < 1e-4, "final loss {end}");
        assert!(trace[0] > trace[499]);
    }

    #[test]
    fn missing_ground_truth_is_a_config_error() {
        let img = Image::filled(8, 8, 3, 0.5);
        let config = SolverConfig {
            iterations: 1,
            required: SupervisedTerms { pose: true, ..Default::default() },
            ..SolverConfig::default()
        };
        let init = ProblemState::initial(8, 8, 3, 0);
        let err = optimize(&img, &img, &CameraIntrinsics::default(), &init, &config, None).unwrap_err();
        assert!(matches!(err, SolverError::Loss(LossError::MissingGroundTruth("pose"))));
    }

    #[test]
    fn split_keeps_total() {
        assert_eq!(split_iterations(10, 3), vec![3, 3, 4]);
        assert_eq!(split_iterations(0, 2), vec![0, 0]);
    }
}
