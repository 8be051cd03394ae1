//! Finite-difference verification of reverse-mode gradients, for single
//! primitives and for the full weighted loss on random problems.
//!
//! Each coordinate is compared against the central difference at step `eps`.
//! When first or second differences at `eps` and `2·eps` do not scale as a
//! smooth function's would, the probe reaches a non-smooth locus (an L1 kink,
//! a clamp corner, a bilinear lattice line or an image border). Such
//! coordinates are compared against second-order one-sided differences on
//! the side away from the locus and against differences at reduced steps,
//! keeping the closest estimate that passes its own consistency test.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{
    self, Add, AutodiffError, Channel, ChannelReduce, Element, Gradient, MaskedL1, NamedTensors, Normalization,
    ParamSet, Primitive, PrimitiveRegistry, Sub, SumSquares, Tanh, Tensor, WeightedSum, STANDARD_PRIMITIVES,
};
use crate::geometry::ops::{Backproject, ObjectMotion, ProjectFlow, RigidTransform, RotationFromSines};
use crate::geometry::{rotation_from_sines, Z_MIN};
use crate::losses::ops::{FirstOrderSmoothness, PoseError, SecondOrderSmoothness};
use crate::losses::{param_names, DepthSupervision, LossConfig, LossSetup, LossWeights, Observations, Supervision};
use crate::solver::ops::{DepthActivation, MaskActivation, MAX_DEPTH};
use crate::solver::unconstrain_depth_value;
use crate::types::{CameraIntrinsics, DepthMap, FlowField, Image};
use crate::warping::BilinearSample;

/// Step and acceptance thresholds for a comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    /// Largest accepted `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub tolerance: f64,
    /// Magnitude below which errors are measured in absolute rather than relative terms.
    pub floor: f64,
}

impl CheckOptions {
    /// Settings for single primitives with unit-scale cotangents.
    pub fn primitive() -> Self {
        Self { eps: 1e-6, tolerance: 1e-6, floor: 1.0 }
    }

    /// Settings for the full loss on a random problem.
    pub fn pipeline() -> Self {
        Self { eps: 1e-4, tolerance: 1e-3, floor: 1e-6 }
    }

    fn rel(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

/// Outcome of comparing every coordinate of one or more gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Random points (inputs or problems) examined.
    pub points: usize,
    pub coordinates: usize,
    /// Coordinates near a non-smooth locus, compared one-sided.
    pub one_sided: usize,
    /// Coordinates near a non-smooth locus, compared at a reduced step.
    pub refined: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// Location of the largest error.
    pub worst: Option<String>,
}

impl CheckReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            points: 0,
            coordinates: 0,
            one_sided: 0,
            refined: 0,
            failures: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.coordinates > 0
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: &CheckReport) {
        self.points += other.points;
        self.coordinates += other.coordinates;
        self.one_sided += other.one_sided;
        self.refined += other.refined;
        self.failures += other.failures;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.clone();
        }
    }

    fn record(&mut self, err: f64, method: Method, tolerance: f64, location: impl FnOnce() -> String) {
        self.coordinates += 1;
        self.one_sided += (method == Method::OneSided) as usize;
        self.refined += (method == Method::Refined) as usize;
        if !(err < tolerance) {
            self.failures += 1;
        }
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err;
            self.worst = Some(location());
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: points={} coords={} one_sided={} refined={} max_rel_err={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.points,
            self.coordinates,
            self.one_sided,
            self.refined,
            self.max_rel_error,
        )?;
        if let Some(w) = &self.worst {
            write!(f, " worst={w}")?;
        }
        Ok(())
    }
}

/// How a coordinate was compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Central difference at the nominal step.
    Central,
    /// Second-order one-sided difference on the side away from a kink.
    OneSided,
    /// Central difference at a reduced step that no longer reaches a kink.
    Refined,
}

/// Smallest step tried, as a fraction of the nominal one.
const MIN_STEP_FRACTION: f64 = 1e-3;

/// Relative error of `analytic` against finite differences of `f` along one coordinate.
fn compare_coordinate(
    f: &mut impl FnMut(f64) -> Result<f64, AutodiffError>,
    analytic: f64,
    opts: &CheckOptions,
) -> Result<(f64, Method), AutodiffError> {
    let f0 = f(0.0)?;
    let mut e = opts.eps;
    let mut best = (f64::INFINITY, Method::Central);
    loop {
        // Rounding noise of one function value, in derivative units at step `e`.
        let ulp = f64::EPSILON * f0.abs() / e;
        let opts = &CheckOptions { floor: opts.floor.max(4.0 * ulp / opts.tolerance), ..*opts };
        let stable = |a: f64, b: f64, noise: f64| {
            (a - b).abs() <= 0.1 * opts.tolerance * a.abs().max(b.abs()).max(opts.floor) + noise * ulp
        };
        let (fp, fm) = (f(e)?, f(-e)?);
        let (fpp, fmm) = (f(2.0 * e)?, f(-2.0 * e)?);
        let central = (fp - fm) / (2.0 * e);
        let wide = (fpp - fmm) / (4.0 * e);
        let curvature = (fp - 2.0 * f0 + fm) / (2.0 * e);
        let curvature_wide = (fpp - 2.0 * f0 + fmm) / (8.0 * e);
        let method = if e == opts.eps { Method::Central } else { Method::Refined };
        if stable(central, wide, 4.0) && stable(curvature, curvature_wide, 8.0) {
            let err = opts.rel(analytic, central);
            if err < best.0 {
                best = (err, method);
            }
            if err < 0.1 * opts.tolerance {
                return Ok(best);
            }
        }
        // Second-order one-sided stencils at `e/2`, `e` and `2e`; a side is
        // usable when all three agree, i.e. no locus lies within `4e` on it.
        let (fhp, fhm) = (f(0.5 * e)?, f(-0.5 * e)?);
        let (f4p, f4m) = (f(4.0 * e)?, f(-4.0 * e)?);
        let sides = [
            [
                (-3.0 * f0 + 4.0 * fhp - fp) / e,
                (-3.0 * f0 + 4.0 * fp - fpp) / (2.0 * e),
                (-3.0 * f0 + 4.0 * fpp - f4p) / (4.0 * e),
            ],
            [
                (3.0 * f0 - 4.0 * fhm + fm) / e,
                (3.0 * f0 - 4.0 * fm + fmm) / (2.0 * e),
                (3.0 * f0 - 4.0 * fmm + f4m) / (4.0 * e),
            ],
        ];
        let consistent =
            |d: f64, other: f64| (d - other).abs() <= 0.01 * opts.tolerance * d.abs().max(opts.floor) + 16.0 * ulp;
        let one_sided = sides
            .into_iter()
            .filter(|[half, d, wide]| consistent(*d, *half) && consistent(*d, *wide))
            .map(|[_, d, _]| opts.rel(analytic, d))
            .fold(f64::INFINITY, f64::min);
        if one_sided < best.0 {
            best = (one_sided, Method::OneSided);
        }
        if best.0 < 0.1 * opts.tolerance {
            return Ok(best);
        }
        e *= 0.1;
        if e < opts.eps * MIN_STEP_FRACTION * 0.5 {
            return Ok(best);
        }
    }
}

/// Compares `analytic` with finite differences of `f` at every scalar of `params`.
pub fn check_coordinates(
    name: &str,
    mut f: impl FnMut(&ParamSet) -> Result<f64, AutodiffError>,
    params: &ParamSet,
    analytic: &Gradient,
    opts: &CheckOptions,
) -> Result<CheckReport, AutodiffError> {
    assert!(params.is_congruent(analytic), "gradient must match the parameter layout");
    let mut report = CheckReport::new(name);
    report.points = 1;
    let flat = analytic.flatten();
    let mut probe = params.clone();
    for (i, &a) in flat.iter().enumerate() {
        let x0 = *probe.scalar_mut(i);
        let mut along = |delta: f64| {
            *probe.scalar_mut(i) = x0 + delta;
            f(&probe)
        };
        let outcome = compare_coordinate(&mut along, a, opts);
        *probe.scalar_mut(i) = x0;
        let (err, method) = outcome?;
        report.record(err, method, opts.tolerance, || {
            let (tensor, index) = params.locate(i).expect("index within parameters");
            format!("{name}:{tensor}[{index}]")
        });
    }
    Ok(report)
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn random_intrinsics(rng: &mut ChaCha8Rng) -> CameraIntrinsics {
    CameraIntrinsics::new(rng.random_range(0.7..1.3), rng.random_range(0.4..0.6), rng.random_range(0.4..0.6))
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    mask[0] = true;
    mask
}

/// Values near zero so that some samples land within a probe step of the L1 kink.
fn near_zero_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform_tensor(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.2) {
            *v = rng.random_range(-2e-6..2e-6);
        }
    }
    t
}

/// A primitive instance with random constants and random inputs inside its domain.
pub fn random_primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Option<(Box<dyn Primitive>, Vec<Tensor>)> {
    let (h, w, k) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(1..4));
    let case: (Box<dyn Primitive>, Vec<Tensor>) = match name {
        autodiff::ADD => {
            (Box::new(Add), vec![uniform_tensor(rng, &[h, w], -2.0, 2.0), uniform_tensor(rng, &[h, w], -2.0, 2.0)])
        }
        autodiff::SUB => {
            (Box::new(Sub), vec![uniform_tensor(rng, &[h, w], -2.0, 2.0), uniform_tensor(rng, &[h, w], -2.0, 2.0)])
        }
        autodiff::TANH => (Box::new(Tanh), vec![uniform_tensor(rng, &[h, w], -3.0, 3.0)]),
        autodiff::CHANNEL => {
            (Box::new(Channel(rng.random_range(0..k))), vec![uniform_tensor(rng, &[h, w, k], -2.0, 2.0)])
        }
        autodiff::WEIGHTED_SUM => {
            let weights: Vec<f64> = (0..k + 1).map(|_| rng.random_range(-2.0..2.0)).collect();
            let inputs = (0..k + 1).map(|_| uniform_tensor(rng, &[1], -2.0, 2.0)).collect();
            (Box::new(WeightedSum(weights)), inputs)
        }
        autodiff::SUM_SQUARES => (Box::new(SumSquares), vec![uniform_tensor(rng, &[h, w], -2.0, 2.0)]),
        autodiff::ELEMENT => {
            (Box::new(Element(rng.random_range(0..h * w))), vec![uniform_tensor(rng, &[h, w], -2.0, 2.0)])
        }
        autodiff::MASKED_L1 => {
            let op = MaskedL1 {
                mask: rng.random_bool(0.7).then(|| random_mask(rng, h * w)),
                channels: if rng.random_bool(0.5) { ChannelReduce::Mean } else { ChannelReduce::Sum },
                normalization: if rng.random_bool(0.5) { Normalization::Valid } else { Normalization::AllPixels },
            };
            (Box::new(op), vec![near_zero_tensor(rng, &[h, w, k])])
        }
        crate::geometry::ops::ROTATION_FROM_SINES => {
            let shape: Vec<usize> = if rng.random_bool(0.5) { vec![3] } else { vec![k, 3] };
            (Box::new(RotationFromSines), vec![uniform_tensor(rng, &shape, -0.9, 0.9)])
        }
        crate::geometry::ops::BACKPROJECT => {
            (Box::new(Backproject(random_intrinsics(rng))), vec![uniform_tensor(rng, &[h, w], 0.5, 5.0)])
        }
        crate::geometry::ops::OBJECT_MOTION => (
            Box::new(ObjectMotion),
            vec![
                uniform_tensor(rng, &[h, w, 3], -2.0, 4.0),
                uniform_tensor(rng, &[h, w, k], 0.0, 1.0),
                uniform_tensor(rng, &[k, 3, 3], -1.0, 1.0),
                uniform_tensor(rng, &[k, 3], -1.0, 1.0),
                uniform_tensor(rng, &[k, 3], -1.0, 1.0),
            ],
        ),
        crate::geometry::ops::RIGID_TRANSFORM => (
            Box::new(RigidTransform),
            vec![
                uniform_tensor(rng, &[h, w, 3], -2.0, 4.0),
                uniform_tensor(rng, &[3, 3], -1.0, 1.0),
                uniform_tensor(rng, &[3], -1.0, 1.0),
                uniform_tensor(rng, &[3], -1.0, 1.0),
            ],
        ),
        crate::geometry::ops::PROJECT_FLOW => {
            let mut pts = uniform_tensor(rng, &[h, w, 3], -1.0, 1.0);
            for z in pts.data_mut().iter_mut().skip(2).step_by(3) {
                *z = if rng.random_bool(0.2) {
                    Z_MIN + rng.random_range(-2e-6..2e-6)
                } else {
                    rng.random_range(0.5..4.0)
                };
            }
            (Box::new(ProjectFlow(random_intrinsics(rng))), vec![pts])
        }
        crate::warping::BILINEAR_SAMPLE => {
            let c = rng.random_range(1..4);
            let src = uniform_tensor(rng, &[h, w, c], 0.0, 1.0);
            let flow = uniform_tensor(rng, &[h, w, 2], -1.5, 1.5);
            (Box::new(BilinearSample), vec![src, flow])
        }
        crate::losses::ops::FIRST_ORDER_SMOOTHNESS => {
            (Box::new(FirstOrderSmoothness), vec![uniform_tensor(rng, &[h, w, k], -1.0, 1.0)])
        }
        crate::losses::ops::SECOND_ORDER_SMOOTHNESS => {
            (Box::new(SecondOrderSmoothness), vec![uniform_tensor(rng, &[h + 1, w + 1], -1.0, 1.0)])
        }
        crate::losses::ops::POSE_ERROR => {
            let s = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let op = PoseError {
                gt_rotation: rotation_from_sines(s[0], s[1], s[2]).expect("sines in range"),
                gt_translation: Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            };
            let ps = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let rot = rotation_from_sines(ps[0], ps[1], ps[2]).expect("sines in range");
            let rot = Tensor::new(vec![3, 3], rot.transpose().as_slice().to_vec());
            (Box::new(op), vec![rot, uniform_tensor(rng, &[3], -1.0, 1.0)])
        }
        crate::solver::ops::DEPTH_ACTIVATION => {
            let mut u = uniform_tensor(rng, &[h, w], -4.0, 4.0);
            let corner = unconstrain_depth_value(MAX_DEPTH);
            for v in u.data_mut() {
                if rng.random_bool(0.2) {
                    *v = corner + rng.random_range(-2e-6..2e-6);
                }
            }
            (Box::new(DepthActivation), vec![u])
        }
        crate::solver::ops::MASK_ACTIVATION => (
            Box::new(MaskActivation { multiplier: rng.random_range(0.5..10.0) }),
            vec![uniform_tensor(rng, &[h, w, k], -2.0, 2.0)],
        ),
        _ => return None,
    };
    Some(case)
}

/// Checks one primitive's adjoint at `points` random inputs, contracting the
/// output with a random cotangent.
pub fn check_primitive(
    name: &str,
    points: usize,
    seed: u64,
    opts: &CheckOptions,
) -> Result<CheckReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport::new(name);
    for point in 0..points {
        let (op, inputs) = random_primitive_case(name, &mut rng)
            .ok_or_else(|| AutodiffError::UnregisteredPrimitive(name.to_string()))?;
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let out = op.forward(&refs)?;
        let cot = uniform_tensor(&mut rng, out.shape(), -1.0, 1.0);
        let needs = vec![true; inputs.len()];
        let adjoints = op.backward(&refs, &out, &cot, &needs);

        let mut params = NamedTensors::new();
        let mut grad = NamedTensors::new();
        for (i, (x, adj)) in inputs.iter().zip(adjoints).enumerate() {
            params.insert(format!("input{i}"), x.clone());
            grad.insert(format!("input{i}"), adj.unwrap_or_else(|| Tensor::zeros(x.shape())));
        }
        let contract = |p: &ParamSet| -> Result<f64, AutodiffError> {
            let xs: Vec<&Tensor> = p.iter().map(|(_, t)| t).collect();
            let y = op.forward(&xs)?;
            Ok(y.data().iter().zip(out.data()).zip(cot.data()).map(|((a, base), c)| (a - base) * c).sum())
        };
        let r = check_coordinates(&format!("{name}#{point}"), contract, &params, &grad, opts)?;
        report.merge(&r);
    }
    report.name = name.to_string();
    Ok(report)
}

/// [`check_primitive`] for every name in `registry`.
pub fn check_registry(
    registry: &PrimitiveRegistry,
    points: usize,
    seed: u64,
) -> Result<Vec<CheckReport>, AutodiffError> {
    let opts = CheckOptions::primitive();
    let names: Vec<&'static str> = registry.names().collect();
    names
        .par_iter()
        .enumerate()
        .map(|(i, name)| check_primitive(name, points, seed.wrapping_add(i as u64), &opts))
        .collect()
}

/// Smooth random colors: a few low-frequency sinusoids per channel.
fn smooth_image(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Image {
    let waves: Vec<Vec<[f64; 4]>> = (0..3)
        .map(|_| {
            (0..4)
                .map(|_| {
                    [
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.3..1.0),
                    ]
                })
                .collect()
        })
        .collect();
    let mut img = Image::filled(width, height, 3, 0.0);
    for y in 0..height {
        for x in 0..width {
            let (xn, yn) = ((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
            for (c, ws) in waves.iter().enumerate() {
                let s: f64 =
                    ws.iter().map(|[fx, fy, ph, a]| a * (std::f64::consts::TAU * (fx * xn + fy * yn) + ph).sin()).sum();
                img.set(x, y, c, 0.5 + 0.5 * (0.7 * s).tanh());
            }
        }
    }
    img
}

fn random_depth_supervision(rng: &mut ChaCha8Rng, width: usize, height: usize) -> DepthSupervision {
    let data =
        (0..width * height).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(1.5..4.0) }).collect();
    DepthSupervision::from_depth(DepthMap::new(width, height, data))
}

/// A random `size×size` problem with every loss term active, and a random
/// point at which to differentiate it. Every variable, pivots included, is free.
pub fn random_problem(size: usize, k: usize, seed: u64) -> Result<(LossSetup, ParamSet), crate::losses::LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame_t = smooth_image(&mut rng, size, size);
    let frame_tp1 = smooth_image(&mut rng, size, size);
    let intrinsics = random_intrinsics(&mut rng);
    let gt_sines = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let gt_rotation: Matrix3<f64> = rotation_from_sines(gt_sines[0], gt_sines[1], gt_sines[2]).expect("sines in range");
    let gt_translation =
        Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let mut flow = FlowField::zeros(size, size);
    for v in flow.u.iter_mut().chain(flow.v.iter_mut()).chain(flow.w.iter_mut()) {
        *v = rng.random_range(-1.0..1.0);
    }
    let supervision = Supervision {
        depth_t: Some(random_depth_supervision(&mut rng, size, size)),
        depth_tp1: Some(random_depth_supervision(&mut rng, size, size)),
        camera_pose: Some((gt_rotation, gt_translation)),
        flow: Some(flow),
    };
    let mut weights = LossWeights::default();
    for term in crate::losses::Term::ALL {
        weights.set(term, rng.random_range(0.1..1.0));
    }
    let config = LossConfig {
        weights,
        k,
        symmetric: true,
        mask_multiplier: rng.random_range(1.0..3.0),
        ..LossConfig::default()
    };
    let setup = LossSetup::new(Observations { frame_t, frame_tp1, intrinsics }, supervision, config)?;

    let mut params = NamedTensors::new();
    for (name, shape) in param_names(size, size, k, true, false) {
        let t = if name.starts_with("depth") {
            uniform_tensor(&mut rng, &shape, unconstrain_depth_value(1.5), unconstrain_depth_value(4.0))
        } else if name.starts_with("mask") {
            uniform_tensor(&mut rng, &shape, -2.0, 2.0)
        } else if name.ends_with(".angles") {
            uniform_tensor(&mut rng, &shape, -0.1, 0.1)
        } else if name.ends_with(".pivot") {
            uniform_tensor(&mut rng, &shape, -0.5, 0.5)
        } else {
            uniform_tensor(&mut rng, &shape, -0.1, 0.1)
        };
        params.insert(name, t);
    }
    Ok((setup, params))
}

/// Checks the full weighted loss on one random problem.
pub fn check_pipeline(size: usize, k: usize, seed: u64, opts: &CheckOptions) -> Result<CheckReport, AutodiffError> {
    let registry = PrimitiveRegistry::standard();
    let (setup, params) = random_problem(size, k, seed)
        .map_err(|e| AutodiffError::Domain { primitive: "random_problem".into(), detail: e.to_string() })?;
    let (_, grad) = autodiff::value_and_grad(&registry, &setup, &params)?;
    let f = |p: &ParamSet| autodiff::evaluate(&registry, &setup, p);
    check_coordinates(&format!("pipeline#{seed}"), f, &params, &grad, opts)
}

/// Summary of a full gradient-check run.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub primitives: Vec<CheckReport>,
    pub pipeline: CheckReport,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.primitives.iter().all(CheckReport::passed) && self.pipeline.passed()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.primitives {
            writeln!(f, "{r}")?;
        }
        write!(f, "{}", self.pipeline)
    }
}

/// Size and count settings of the standard suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteConfig {
    pub primitive_points: usize,
    pub problems: usize,
    pub size: usize,
    pub k: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { primitive_points: 100, problems: 20, size: 16, k: 3 }
    }
}

/// Checks every standard primitive, then the full loss on `problems` random problems in parallel.
pub fn run_suite(seed: u64, config: &SuiteConfig) -> Result<SuiteReport, AutodiffError> {
    let primitives = check_registry(&PrimitiveRegistry::standard(), config.primitive_points, seed)?;
    let opts = CheckOptions::pipeline();
    let runs: Vec<CheckReport> = (0..config.problems as u64)
        .into_par_iter()
        .map(|i| check_pipeline(config.size, config.k, seed.wrapping_mul(1000).wrapping_add(i), &opts))
        .collect::<Result<_, _>>()?;
    let mut pipeline = CheckReport::new(format!("pipeline {0}x{0} K={1}", config.size, config.k));
    for r in &runs {
        pipeline.merge(r);
    }
    Ok(SuiteReport { primitives, pipeline })
}

/// Whether every standard primitive has a random-case generator.
pub fn covers_standard_primitives() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    STANDARD_PRIMITIVES.iter().all(|n| random_primitive_case(n, &mut rng).is_some())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_has_a_generator() {
        assert!(covers_standard_primitives());
    }

    #[test]
    fn kink_is_compared_one_sided() {
        let opts = CheckOptions::primitive();
        let mut abs = |d: f64| Ok((1e-7 + d).abs());
        let (err, method) = compare_coordinate(&mut abs, 1.0, &opts).unwrap();
        assert_eq!(method, Method::OneSided);
        assert!(err < 1e-9);
        let mut wrong = |d: f64| Ok((1e-7 + d).abs());
        assert!(compare_coordinate(&mut wrong, 0.0, &opts).unwrap().0 > 0.1);
    }

    #[test]
    fn smooth_coordinate_uses_central_difference() {
        let opts = CheckOptions::primitive();
        let mut sin = |d: f64| Ok((0.3 + d).sin());
        let (err, method) = compare_coordinate(&mut sin, 0.3f64.cos(), &opts).unwrap();
        assert_eq!(method, Method::Central);
        assert!(err < 1e-9);
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        let mut params = NamedTensors::new();
        params.insert("x", Tensor::from_slice(&[2], &[1.0, 2.0]));
        let grad = NamedTensors::new().with("x", Tensor::from_slice(&[2], &[2.0, 5.0]));
        let f = |p: &ParamSet| Ok(p.get("x").unwrap().data().iter().map(|v| v * v).sum());
        let r = check_coordinates("sq", f, &params, &grad, &CheckOptions::primitive()).unwrap();
        assert_eq!(r.failures, 1);
        assert!(!r.passed());
    }
}
