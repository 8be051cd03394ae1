//! Evaluation metrics: scale-invariant depth error, relative pose error,
//! motion-mask IoU and flow endpoint error.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::losses;
use crate::types::{DepthMap, FlowField, MotionMaskStack, RigidMotion};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("no valid pixels to evaluate")]
    EmptyValidMask,
    #[error("no ground-truth objects to match")]
    NoObjects,
    #[error("non-positive depth {value} at pixel {pixel}")]
    NonPositiveDepth { pixel: usize, value: f64 },
    #[error("threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Variance of `log(d / d_gt)` over valid pixels, accumulated in two passes.
pub fn scale_invariant_log_rmse(depth: &DepthMap, gt: &DepthMap, valid: &[bool]) -> Result<f64, MetricError> {
    if (depth.width, depth.height) != (gt.width, gt.height) || valid.len() != gt.data.len() {
        return Err(MetricError::Shape("depth maps and mask must agree".into()));
    }
    let mut errs = Vec::new();
    for (i, ((&d, &g), &ok)) in depth.data.iter().zip(&gt.data).zip(valid).enumerate() {
        if !ok {
            continue;
        }
        for value in [d, g] {
            if !(value > 0.0) {
                return Err(MetricError::NonPositiveDepth { pixel: i, value });
            }
        }
        errs.push((d / g).ln());
    }
    if errs.is_empty() {
        return Err(MetricError::EmptyValidMask);
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    Ok(errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n)
}

/// Translation norm and rotation angle (radians) between a predicted and a
/// ground-truth frame-to-frame motion.
pub fn relative_pose_error(
    pred: &RigidMotion,
    gt_rotation: &Matrix3<f64>,
    gt_translation: &Vector3<f64>,
) -> Result<(f64, f64), MetricError> {
    losses::pose_error(pred, gt_rotation, gt_translation).map_err(|e| match e {
        losses::LossError::Geometry(g) => MetricError::Geometry(g),
        other => MetricError::Shape(other.to_string()),
    })
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binarized predicted masks and their complements (`2K` proposals).
pub fn mask_proposals(pred: &MotionMaskStack, threshold: f64) -> Vec<Vec<bool>> {
    let mut out = Vec::with_capacity(2 * pred.k);
    for k in 0..pred.k {
        let mask: Vec<bool> = pred.layer(k).iter().map(|&m| m >= threshold).collect();
        out.push(mask.iter().map(|&m| !m).collect());
        out.push(mask);
    }
    out
}

/// Mean over ground-truth objects of the best IoU among every predicted mask
/// and its complement. An empty union counts as a perfect match.
pub fn mask_iou(pred: &MotionMaskStack, gt_objects: &[Vec<bool>], threshold: f64) -> Result<f64, MetricError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricError::Threshold(threshold));
    }
    if gt_objects.is_empty() {
        return Err(MetricError::NoObjects);
    }
    let n = pred.width * pred.height;
    if gt_objects.iter().any(|g| g.len() != n) {
        return Err(MetricError::Shape("ground-truth object mask size differs from prediction".into()));
    }
    let proposals = mask_proposals(pred, threshold);
    let total: f64 = gt_objects.iter().map(|g| proposals.iter().map(|p| iou(p, g)).fold(0.0, f64::max)).sum();
    Ok(total / gt_objects.len() as f64)
}

/// Mean Euclidean distance between `(U, V)` vectors over valid pixels.
pub fn endpoint_error(flow: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<f64, MetricError> {
    if (flow.width, flow.height) != (gt.width, gt.height) || valid.len() != gt.u.len() {
        return Err(MetricError::Shape("flow fields and mask must agree".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in valid.iter().enumerate().filter(|(_, &ok)| ok) {
        sum += (flow.u[i] - gt.u[i]).hypot(flow.v[i] - gt.v[i]);
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyValidMask);
    }
    Ok(sum / n as f64)
}

/// Named scalar results per frame pair, with means over pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a metric; rejects negative or non-finite values.
    pub fn insert(&mut self, pair: &str, metric: &str, value: f64) -> Result<(), String> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(format!("{pair}/{metric} = {value} is not a finite nonnegative number"));
        }
        self.pairs.entry(pair.to_string()).or_default().insert(metric.to_string(), value);
        Ok(())
    }

    pub fn get(&self, pair: &str, metric: &str) -> Option<f64> {
        self.pairs.get(pair)?.get(metric).copied()
    }

    /// Mean of each metric over the pairs that report it.
    pub fn aggregates(&self) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for metrics in self.pairs.values() {
            for (name, &v) in metrics {
                let e = sums.entry(name.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// `pair.metric=value` lines followed by `mean.metric=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (pair, metrics) in &self.pairs {
            for (name, v) in metrics {
                out.push_str(&format!("{pair}.{name}={v}\n"));
            }
        }
        for (name, v) in self.aggregates() {
            out.push_str(&format!("mean.{name}={v}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let doc = serde_json::json!({
            "pairs": self.pairs,
            "mean": self.aggregates(),
        });
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Doc {
            pairs: BTreeMap<String, BTreeMap<String, f64>>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        Ok(Self { pairs: doc.pairs })
    }
}
