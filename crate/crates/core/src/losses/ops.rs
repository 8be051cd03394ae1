//! Smoothness and pose-error primitives.

use nalgebra::{Matrix3, Vector3};

use crate::autodiff::{arity, l1_sign, AutodiffError, Primitive, Tensor};

pub const FIRST_ORDER_SMOOTHNESS: &str = "first_order_smoothness";
pub const SECOND_ORDER_SMOOTHNESS: &str = "second_order_smoothness";
pub const POSE_ERROR: &str = "pose_error";

fn grid(name: &str, t: &Tensor) -> Result<(usize, usize, usize), AutodiffError> {
    t.grid_dims()
        .filter(|&(h, w, _)| h > 0 && w > 0)
        .ok_or_else(|| AutodiffError::shape(name, format!("expected a nonempty grid, got {:?}", t.shape())))
}

#[inline]
fn inv_count(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

/// `Σ_c [mean_x |f(x+1,y) − f(x,y)| + mean_y |f(x,y+1) − f(x,y)|]`, each
/// mean taken over the adjacent pairs along that axis.
#[derive(Debug, Clone, Copy)]
pub struct FirstOrderSmoothness;

impl FirstOrderSmoothness {
    /// Visits every adjacent pair as `(index_a, index_b, weight)` with the
    /// difference taken as `f[b] − f[a]`.
    fn for_each_pair(h: usize, w: usize, c: usize, mut visit: impl FnMut(usize, usize, f64)) {
        let sx = inv_count((w - 1) * h);
        let sy = inv_count(w * (h - 1));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    if x + 1 < w {
                        visit(i, i + c, sx);
                    }
                    if y + 1 < h {
                        visit(i, i + w * c, sy);
                    }
                }
            }
        }
    }
}

impl Primitive for FirstOrderSmoothness {
    fn name(&self) -> &'static str {
        FIRST_ORDER_SMOOTHNESS
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(FIRST_ORDER_SMOOTHNESS, inputs, 1)?;
        let (h, w, c) = grid(FIRST_ORDER_SMOOTHNESS, inputs[0])?;
        let f = inputs[0].data();
        let mut total = 0.0;
        Self::for_each_pair(h, w, c, |a, b, s| total += s * (f[b] - f[a]).abs());
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (h, w, c) = inputs[0].grid_dims().expect("validated in forward");
        let f = inputs[0].data();
        let g = g.item();
        let mut out = Tensor::zeros(inputs[0].shape());
        let d = out.data_mut();
        Self::for_each_pair(h, w, c, |a, b, s| {
            let v = g * s * l1_sign(f[b] - f[a]);
            d[b] += v;
            d[a] -= v;
        });
        vec![Some(out)]
    }
}

/// `mean_x |f(x+1) − 2f(x) + f(x−1)| + mean_y |…|` over the pixels that
/// have both neighbors along the respective axis, summed over channels.
#[derive(Debug, Clone, Copy)]
pub struct SecondOrderSmoothness;

impl SecondOrderSmoothness {
    /// Visits every centered triple `(prev, center, next, weight)`.
    fn for_each_triple(h: usize, w: usize, c: usize, mut visit: impl FnMut(usize, usize, usize, f64)) {
        let sx = inv_count(w.saturating_sub(2) * h);
        let sy = inv_count(w * h.saturating_sub(2));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    if x >= 1 && x + 1 < w {
                        visit(i - c, i, i + c, sx);
                    }
                    if y >= 1 && y + 1 < h {
                        visit(i - w * c, i, i + w * c, sy);
                    }
                }
            }
        }
    }
}

impl Primitive for SecondOrderSmoothness {
    fn name(&self) -> &'static str {
        SECOND_ORDER_SMOOTHNESS
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(SECOND_ORDER_SMOOTHNESS, inputs, 1)?;
        let (h, w, c) = grid(SECOND_ORDER_SMOOTHNESS, inputs[0])?;
        let f = inputs[0].data();
        let mut total = 0.0;
        Self::for_each_triple(h, w, c, |a, b, n, s| total += s * (f[n] - 2.0 * f[b] + f[a]).abs());
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (h, w, c) = inputs[0].grid_dims().expect("validated in forward");
        let f = inputs[0].data();
        let g = g.item();
        let mut out = Tensor::zeros(inputs[0].shape());
        let d = out.data_mut();
        Self::for_each_triple(h, w, c, |a, b, n, s| {
            let v = g * s * l1_sign(f[n] - 2.0 * f[b] + f[a]);
            d[a] += v;
            d[b] -= 2.0 * v;
            d[n] += v;
        });
        vec![Some(out)]
    }
}

/// Translation norm and rotation angle of the relative transform between a
/// predicted pose and a fixed ground truth.
///
/// `t_err = R⁻¹(t_gt − t)`, `R_err = R⁻¹·R_gt`. The angle is evaluated as
/// `2·atan2(‖vee(R_err − R_errᵀ)‖, trace(R_err) + 1)` up to 120°
/// and `atan2(‖vee‖, trace − 1)` above it. Both equal
/// `arccos(clamp((trace − 1)/2, −1, 1))` on rotations; the half-angle form
/// is the better conditioned one near the identity.
#[derive(Debug, Clone, Copy)]
pub struct PoseError {
    pub gt_rotation: Matrix3<f64>,
    pub gt_translation: Vector3<f64>,
}

/// Rotation angle of `e`, plus the derivative of the angle with respect to `e`.
pub(crate) fn rotation_angle(e: &Matrix3<f64>) -> (f64, Matrix3<f64>) {
    let v = Vector3::new(e[(2, 1)] - e[(1, 2)], e[(0, 2)] - e[(2, 0)], e[(1, 0)] - e[(0, 1)]);
    let s = v.norm();
    let trace = e.trace();
    // Angle and its partials with respect to `s` and to each diagonal entry.
    let (angle, da_ds, da_dc) = if trace >= 0.0 {
        let c = trace + 1.0;
        let denom = s * s + c * c;
        (2.0 * s.atan2(c), 2.0 * c / denom, -2.0 * s / denom)
    } else {
        let c = trace - 1.0;
        let denom = s * s + c * c;
        (s.atan2(c), c / denom, -s / denom)
    };
    let mut grad = Matrix3::zeros();
    for i in 0..3 {
        grad[(i, i)] = da_dc;
    }
    if s > 0.0 {
        let u = v / s * da_ds;
        grad[(2, 1)] += u.x;
        grad[(1, 2)] -= u.x;
        grad[(0, 2)] += u.y;
        grad[(2, 0)] -= u.y;
        grad[(1, 0)] += u.z;
        grad[(0, 1)] -= u.z;
    }
    (angle, grad)
}

/// `(‖R⁻¹(t_gt − t)‖, angle(R⁻¹·R_gt))`.
pub fn relative_pose_error(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    gt_rotation: &Matrix3<f64>,
    gt_translation: &Vector3<f64>,
) -> (f64, f64) {
    let rt = rotation.transpose();
    let t_err = rt * (gt_translation - translation);
    let (angle, _) = rotation_angle(&(rt * gt_rotation));
    (t_err.norm(), angle)
}

impl Primitive for PoseError {
    fn name(&self) -> &'static str {
        POSE_ERROR
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(POSE_ERROR, inputs, 2)?;
        if inputs[0].shape() != [3, 3] || inputs[1].shape() != [3] {
            return Err(AutodiffError::shape(POSE_ERROR, "expected rotation [3, 3] and translation [3]"));
        }
        let r = Matrix3::from_row_slice(inputs[0].data());
        let t = Vector3::from_column_slice(inputs[1].data());
        let (te, re) = relative_pose_error(&r, &t, &self.gt_rotation, &self.gt_translation);
        Ok(Tensor::from_slice(&[2], &[te, re]))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let r = Matrix3::from_row_slice(inputs[0].data());
        let t = Vector3::from_column_slice(inputs[1].data());
        let (g_trans, g_rot) = (g.data()[0], g.data()[1]);
        let delta = self.gt_translation - t;
        let e = r.transpose() * delta;
        let norm = e.norm();

        let mut gr = Matrix3::zeros();
        let mut gt = Vector3::zeros();
        if norm > 0.0 {
            let unit = e / norm;
            gr += g_trans * delta * unit.transpose();
            gt -= g_trans * (r * unit);
        }
        let (_, da_de) = rotation_angle(&(r.transpose() * self.gt_rotation));
        // E = Rᵀ·R_gt  ⇒  ∂/∂R = R_gt·(∂/∂E)ᵀ
        gr += g_rot * self.gt_rotation * da_de.transpose();

        let mut gr_t = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                gr_t.data_mut()[3 * i + j] = gr[(i, j)];
            }
        }
        vec![Some(gr_t), Some(Tensor::from_slice(&[3], gt.as_slice()))]
    }
}
