//! Photometric, smoothness, forward-backward and supervised objectives.
//!
//! Warping-based losses average over valid samples only. Depth supervision
//! keeps the `1/(w·h)` normalization regardless of the ground-truth mask.

pub mod ops;
mod total;

pub use ops::{relative_pose_error, FirstOrderSmoothness, PoseError, SecondOrderSmoothness};
pub use total::{
    build_total_loss, param_names, Direction, LossConfig, LossDiagnostics, LossSetup, Observations, SupervisedTerms,
    Supervision, Term, TotalLoss,
};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ChannelReduce, MaskedL1, Normalization, Primitive, Tensor};
use crate::geometry::GeometryError;
use crate::types::{DepthMap, FlowField, Image, RigidMotion};
use crate::warping::{bilinear_sample, SampleGrid};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0} supervision requested but no ground truth was supplied")]
    MissingGroundTruth(&'static str),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Nonnegative weight per objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_color: f64,
    pub w_flow_smooth: f64,
    pub w_mask_smooth: f64,
    pub w_depth_smooth: f64,
    pub w_fb: f64,
    pub w_depth_sup: f64,
    pub w_pose_trans: f64,
    pub w_pose_rot: f64,
    pub w_flow_sup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_color: 1.0,
            w_flow_smooth: 0.1,
            w_mask_smooth: 0.1,
            w_depth_smooth: 0.1,
            w_fb: 0.1,
            w_depth_sup: 1.0,
            w_pose_trans: 1.0,
            w_pose_rot: 1.0,
            w_flow_sup: 1.0,
        }
    }
}

impl LossWeights {
    /// All weights zero.
    pub fn none() -> Self {
        Self {
            w_color: 0.0,
            w_flow_smooth: 0.0,
            w_mask_smooth: 0.0,
            w_depth_smooth: 0.0,
            w_fb: 0.0,
            w_depth_sup: 0.0,
            w_pose_trans: 0.0,
            w_pose_rot: 0.0,
            w_flow_sup: 0.0,
        }
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Color => self.w_color,
            Term::FlowSmooth => self.w_flow_smooth,
            Term::MaskSmooth => self.w_mask_smooth,
            Term::DepthSmooth => self.w_depth_smooth,
            Term::ForwardBackward => self.w_fb,
            Term::DepthSup => self.w_depth_sup,
            Term::PoseTrans => self.w_pose_trans,
            Term::PoseRot => self.w_pose_rot,
            Term::FlowSup => self.w_flow_sup,
        }
    }

    pub fn set(&mut self, term: Term, value: f64) {
        let slot = match term {
            Term::Color => &mut self.w_color,
            Term::FlowSmooth => &mut self.w_flow_smooth,
            Term::MaskSmooth => &mut self.w_mask_smooth,
            Term::DepthSmooth => &mut self.w_depth_smooth,
            Term::ForwardBackward => &mut self.w_fb,
            Term::DepthSup => &mut self.w_depth_sup,
            Term::PoseTrans => &mut self.w_pose_trans,
            Term::PoseRot => &mut self.w_pose_rot,
            Term::FlowSup => &mut self.w_flow_sup,
        };
        *slot = value;
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = Term::ALL.map(|t| self.get(t));
        if let Some(t) = Term::ALL.iter().find(|t| !(self.get(**t) >= 0.0 && self.get(**t).is_finite())) {
            return Err(LossError::InvalidWeights(format!(
                "{} = {} must be finite and nonnegative",
                t.weight_key(),
                self.get(*t)
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(LossError::InvalidWeights("at least one weight must be positive".into()));
        }
        Ok(())
    }
}

/// Sparse depth ground truth; `mask[i]` marks pixels where `depth` is observed.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSupervision {
    pub depth: DepthMap,
    pub mask: Vec<bool>,
}

impl DepthSupervision {
    /// Treats zero (or non-positive) depth as missing.
    pub fn from_depth(depth: DepthMap) -> Self {
        let mask = depth.data.iter().map(|&d| d > 0.0).collect();
        Self { depth, mask }
    }
}

/// Value of a warping-based loss and the number of valid samples it averaged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpLoss {
    pub value: f64,
    pub valid_pixels: usize,
}

impl WarpLoss {
    /// No sample landed inside the image; `value` is 0 by convention.
    pub fn is_degenerate(&self) -> bool {
        self.valid_pixels == 0
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

fn masked_mean(diff: &Tensor, mask: Vec<bool>) -> WarpLoss {
    let valid_pixels = mask.iter().filter(|&&v| v).count();
    let value = MaskedL1::valid_mean(mask).forward(&[diff]).expect("shapes checked by caller").item();
    WarpLoss { value, valid_pixels }
}

/// Mean over valid pixels and channels of `|I_t(x, y) − I_{t+1}(x+U, y+V)|`.
pub fn photometric_loss(frame_t: &Image, frame_tp1: &Image, flow: &FlowField) -> Result<WarpLoss, LossError> {
    check_dims((frame_t.width, frame_t.height), (frame_tp1.width, frame_tp1.height), "frames")?;
    check_dims((frame_t.width, frame_t.height), (flow.width, flow.height), "flow")?;
    if frame_t.channels != frame_tp1.channels {
        return Err(LossError::Shape("frames differ in channel count".into()));
    }
    let (warped, valid) = bilinear_sample(&frame_tp1.to_tensor(), &SampleGrid::from_flow(flow));
    let diff: Vec<f64> = frame_t.data.iter().zip(warped.data()).map(|(a, b)| a - b).collect();
    Ok(masked_mean(&Tensor::new(warped.shape().to_vec(), diff), valid))
}

/// First-order L1 smoothness of an `[h, w]` or `[h, w, c]` grid.
pub fn first_order_smoothness(field: &Tensor) -> Result<f64, LossError> {
    Ok(FirstOrderSmoothness.forward(&[field])?.item())
}

/// First-order smoothness of the `(U, V)` components of a flow field.
pub fn flow_smoothness(flow: &FlowField) -> f64 {
    FirstOrderSmoothness.forward(&[&flow.uv_tensor()]).expect("flow is a grid").item()
}

/// Second-order L1 smoothness of a depth map.
pub fn second_order_depth_smoothness(depth: &DepthMap) -> Result<f64, LossError> {
    Ok(SecondOrderSmoothness.forward(&[&depth.to_tensor()])?.item())
}

/// Mean over valid pixels of `|(d_t + W) − d_{t+1}(x+U, y+V)|`.
pub fn forward_backward_loss(
    depth_t: &DepthMap,
    depth_tp1: &DepthMap,
    flow: &FlowField,
) -> Result<WarpLoss, LossError> {
    check_dims((depth_t.width, depth_t.height), (depth_tp1.width, depth_tp1.height), "depth maps")?;
    check_dims((depth_t.width, depth_t.height), (flow.width, flow.height), "flow")?;
    let (warped, valid) = bilinear_sample(&depth_tp1.to_tensor(), &SampleGrid::from_flow(flow));
    let diff: Vec<f64> = depth_t.data.iter().zip(&flow.w).zip(warped.data()).map(|((d, w), s)| d + w - s).collect();
    Ok(masked_mean(&Tensor::new(warped.shape().to_vec(), diff), valid))
}

/// `(1/(w·h))·Σ mask·|d − d_gt|`.
pub fn depth_supervision_loss(depth: &DepthMap, sup: &DepthSupervision) -> Result<f64, LossError> {
    check_dims((depth.width, depth.height), (sup.depth.width, sup.depth.height), "depth supervision")?;
    let diff: Vec<f64> = depth.data.iter().zip(&sup.depth.data).map(|(a, b)| a - b).collect();
    let op = MaskedL1 {
        mask: Some(sup.mask.clone()),
        channels: ChannelReduce::Sum,
        normalization: Normalization::AllPixels,
    };
    Ok(op.forward(&[&Tensor::new(vec![depth.height, depth.width], diff)])?.item())
}

/// Translation norm and rotation angle (radians) of the transform between a
/// predicted motion and a ground-truth rotation and translation.
pub fn pose_error(
    pred: &RigidMotion,
    gt_rotation: &Matrix3<f64>,
    gt_translation: &Vector3<f64>,
) -> Result<(f64, f64), LossError> {
    Ok(relative_pose_error(&pred.rotation()?, &pred.t(), gt_rotation, gt_translation))
}

/// Mean over pixels of `|U − U_gt| + |V − V_gt|`.
pub fn flow_supervision_loss(flow: &FlowField, gt: &FlowField) -> Result<f64, LossError> {
    check_dims((flow.width, flow.height), (gt.width, gt.height), "flow supervision")?;
    let diff: Vec<f64> = flow.uv_tensor().data().iter().zip(gt.uv_tensor().data()).map(|(a, b)| a - b).collect();
    let op = MaskedL1 { mask: None, channels: ChannelReduce::Sum, normalization: Normalization::AllPixels };
    Ok(op.forward(&[&Tensor::new(vec![flow.height, flow.width, 2], diff)])?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn photometric_identical_frames() {
        let img = Image::new(3, 2, 3, (0..18).map(|i| i as f64 / 18.0).collect());
        let l = photometric_loss(&img, &img, &FlowField::zeros(3, 2)).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.valid_pixels, 6);
    }

    #[test]
    fn photometric_constant_image_any_flow() {
        let img = Image::filled(6, 5, 3, 0.3);
        let mut flow = FlowField::zeros(6, 5);
        flow.u.iter_mut().enumerate().for_each(|(i, u)| *u = 0.37 * (i % 3) as f64);
        flow.v.iter_mut().enumerate().for_each(|(i, v)| *v = -0.21 * (i % 2) as f64);
        assert!(photometric_loss(&img, &img, &flow).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn photometric_all_invalid_is_flagged_zero() {
        let img = Image::filled(4, 4, 1, 0.5);
        let mut flow = FlowField::zeros(4, 4);
        flow.u.iter_mut().for_each(|u| *u = 10.0);
        let l = photometric_loss(&img, &Image::filled(4, 4, 1, 0.1), &flow).unwrap();
        assert!(l.is_degenerate());
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn smoothness_hand_cases() {
        assert_eq!(first_order_smoothness(&Tensor::filled(&[4, 5, 2], 3.0)).unwrap(), 0.0);
        let ramp = Tensor::new(vec![1, 6], (0..6).map(|x| x as f64).collect());
        assert_eq!(first_order_smoothness(&ramp).unwrap(), 1.0);
        let affine = DepthMap::new(5, 4, (0..20).map(|i| 0.3 * (i % 5) as f64 - 0.7 * (i / 5) as f64 + 2.0).collect());
        assert!(second_order_depth_smoothness(&affine).unwrap().abs() < 1e-14);
        assert_eq!(second_order_depth_smoothness(&DepthMap::filled(3, 3, 4.0)).unwrap(), 0.0);
    }

    #[test]
    fn forward_backward_hand_cases() {
        let d = DepthMap::new(3, 3, (1..=9).map(|v| v as f64).collect());
        let flow = FlowField::zeros(3, 3);
        assert_eq!(forward_backward_loss(&d, &d, &flow).unwrap().value, 0.0);
        let shifted = DepthMap::new(3, 3, d.data.iter().map(|v| v + 1.0).collect());
        assert_eq!(forward_backward_loss(&d, &shifted, &flow).unwrap().value, 1.0);
    }

    #[test]
    fn depth_supervision_hand_cases() {
        let gt = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let sup = DepthSupervision { depth: gt.clone(), mask: vec![true, true, false, false] };
        assert_eq!(depth_supervision_loss(&gt, &sup).unwrap(), 0.0);
        let off = DepthMap::new(2, 2, vec![1.5, 1.5, 9.0, 9.0]);
        assert_eq!(depth_supervision_loss(&off, &sup).unwrap(), 0.25);
        let none = DepthSupervision { depth: gt, mask: vec![false; 4] };
        assert_eq!(depth_supervision_loss(&off, &none).unwrap(), 0.0);
    }

    #[test]
    fn zero_depth_is_missing() {
        let sup = DepthSupervision::from_depth(DepthMap::new(2, 1, vec![0.0, 2.0]));
        assert_eq!(sup.mask, vec![false, true]);
    }

    #[test]
    fn pose_error_hand_cases() {
        let pred = RigidMotion::new([0.1, -0.2, 0.3], [0.5, 0.1, -0.4], [0.0; 3]);
        let (te, re) = pose_error(&pred, &pred.rotation().unwrap(), &pred.t()).unwrap();
        assert!(te < 1e-15 && re < 1e-12);

        let s30 = (PI / 6.0).sin();
        let gt_r = crate::geometry::rotation_from_sines(0.0, s30, 0.0).unwrap();
        let (te, re) = pose_error(&RigidMotion::identity(), &gt_r, &Vector3::zeros()).unwrap();
        assert_eq!(te, 0.0);
        assert_eq!(re, PI / 6.0);

        let (te, re) =
            pose_error(&RigidMotion::identity(), &Matrix3::identity(), &Vector3::new(1.0, 2.0, 2.0)).unwrap();
        assert_eq!((te, re), (3.0, 0.0));
    }

    #[test]
    fn flow_supervision_hand_cases() {
        let gt = FlowField::zeros(3, 2);
        assert_eq!(flow_supervision_loss(&gt, &gt).unwrap(), 0.0);
        let mut off = gt.clone();
        off.u.iter_mut().for_each(|u| *u = 1.0);
        assert_eq!(flow_supervision_loss(&off, &gt).unwrap(), 1.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights::none().validate().is_err());
        let mut w = LossWeights::none();
        w.w_fb = -1.0;
        assert!(w.validate().is_err());
        w.w_fb = 0.5;
        assert!(w.validate().is_ok());
    }
}
