//! Differentiable forms of the geometric stages, with hand-derived adjoints.

use nalgebra::{Matrix3, Vector3};

use super::{backproject_point, pixel_to_normalized, rotation_from_sines, rotation_sine_jacobians, Z_MIN};
use crate::autodiff::{arity, AutodiffError, Primitive, Tensor};
use crate::types::CameraIntrinsics;

pub const ROTATION_FROM_SINES: &str = "rotation_from_sines";
pub const BACKPROJECT: &str = "backproject";
pub const OBJECT_MOTION: &str = "object_motion";
pub const RIGID_TRANSFORM: &str = "rigid_transform";
pub const PROJECT_FLOW: &str = "project_flow";

fn mat_at(data: &[f64], k: usize) -> Matrix3<f64> {
    Matrix3::from_row_slice(&data[9 * k..9 * k + 9])
}

fn vec_at(data: &[f64], k: usize) -> Vector3<f64> {
    Vector3::new(data[3 * k], data[3 * k + 1], data[3 * k + 2])
}

fn add_vec(data: &mut [f64], k: usize, v: &Vector3<f64>) {
    data[3 * k] += v.x;
    data[3 * k + 1] += v.y;
    data[3 * k + 2] += v.z;
}

fn add_mat(data: &mut [f64], k: usize, m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            data[9 * k + 3 * r + c] += m[(r, c)];
        }
    }
}

fn points_dims(name: &str, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    match t.shape() {
        &[h, w, 3] => Ok((h, w)),
        s => Err(AutodiffError::shape(name, format!("expected [h, w, 3] points, got {s:?}"))),
    }
}

/// Sines `[3]` or `[K, 3]` to rotation matrices `[3, 3]` or `[K, 3, 3]` (row-major).
#[derive(Debug, Clone, Copy)]
pub struct RotationFromSines;

impl Primitive for RotationFromSines {
    fn name(&self) -> &'static str {
        ROTATION_FROM_SINES
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(ROTATION_FROM_SINES, inputs, 1)?;
        let s = inputs[0];
        let shape = match s.shape() {
            [3] => vec![3, 3],
            &[k, 3] => vec![k, 3, 3],
            other => {
                return Err(AutodiffError::shape(
                    ROTATION_FROM_SINES,
                    format!("expected [3] or [K, 3] sines, got {other:?}"),
                ))
            }
        };
        let mut data = Vec::with_capacity(s.len() * 3);
        for triple in s.data().chunks(3) {
            let r = rotation_from_sines(triple[0], triple[1], triple[2]).map_err(|e| AutodiffError::Domain {
                primitive: ROTATION_FROM_SINES.to_string(),
                detail: e.to_string(),
            })?;
            for row in 0..3 {
                for col in 0..3 {
                    data.push(r[(row, col)]);
                }
            }
        }
        Ok(Tensor::new(shape, data))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = inputs[0];
        let mut out = Tensor::zeros(s.shape());
        for (k, triple) in s.data().chunks(3).enumerate() {
            let jac = rotation_sine_jacobians([triple[0], triple[1], triple[2]]);
            let gr = mat_at(g.data(), k);
            for (i, j) in jac.iter().enumerate() {
                out.data_mut()[3 * k + i] = gr.component_mul(j).sum();
            }
        }
        vec![Some(out)]
    }
}

/// Depth `[h, w]` to camera-frame points `[h, w, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct Backproject(pub CameraIntrinsics);

impl Primitive for Backproject {
    fn name(&self) -> &'static str {
        BACKPROJECT
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(BACKPROJECT, inputs, 1)?;
        let &[h, w] = inputs[0].shape() else {
            return Err(AutodiffError::shape(BACKPROJECT, "expected an [h, w] depth grid"));
        };
        let d = inputs[0].data();
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            let yn = pixel_to_normalized(y, h);
            for x in 0..w {
                let p = backproject_point(pixel_to_normalized(x, w), yn, d[y * w + x], &self.0);
                data.extend_from_slice(&[p.x, p.y, p.z]);
            }
        }
        Ok(Tensor::new(vec![h, w, 3], data))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let &[h, w] = inputs[0].shape() else { unreachable!() };
        let k = &self.0;
        let mut out = Tensor::zeros(&[h, w]);
        let gd = out.data_mut();
        for y in 0..h {
            let ry = (pixel_to_normalized(y, h) - k.cy) / k.f;
            for x in 0..w {
                let rx = (pixel_to_normalized(x, w) - k.cx) / k.f;
                let i = y * w + x;
                let gp = &g.data()[3 * i..3 * i + 3];
                gd[i] = gp[0] * rx + gp[1] * ry + gp[2];
            }
        }
        vec![Some(out)]
    }
}

/// Masked object motions. Inputs: points `[h, w, 3]`, masks `[h, w, K]`,
/// rotations `[K, 3, 3]`, translations `[K, 3]`, pivots `[K, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct ObjectMotion;

impl Primitive for ObjectMotion {
    fn name(&self) -> &'static str {
        OBJECT_MOTION
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(OBJECT_MOTION, inputs, 5)?;
        let (h, w) = points_dims(OBJECT_MOTION, inputs[0])?;
        let k = match inputs[1].shape() {
            &[mh, mw, k] if mh == h && mw == w => k,
            s => {
                return Err(AutodiffError::shape(
                    OBJECT_MOTION,
                    format!("masks {s:?} do not match points [{h}, {w}, 3]"),
                ))
            }
        };
        if inputs[2].shape() != [k, 3, 3] || inputs[3].shape() != [k, 3] || inputs[4].shape() != [k, 3] {
            return Err(AutodiffError::shape(OBJECT_MOTION, format!("motion parameters do not match K = {k}")));
        }
        let rots: Vec<_> = (0..k).map(|j| mat_at(inputs[2].data(), j)).collect();
        let trans: Vec<_> = (0..k).map(|j| vec_at(inputs[3].data(), j)).collect();
        let pivots: Vec<_> = (0..k).map(|j| vec_at(inputs[4].data(), j)).collect();
        let masks = inputs[1].data();
        let mut out = inputs[0].clone();
        for (i, px) in out.data_mut().chunks_mut(3).enumerate() {
            let x = Vector3::new(px[0], px[1], px[2]);
            let mut y = x;
            for j in 0..k {
                let m = masks[i * k + j];
                y += m * (rots[j] * (x - pivots[j]) + trans[j] - x);
            }
            px.copy_from_slice(y.as_slice());
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let k = inputs[1].shape()[2];
        let rots: Vec<_> = (0..k).map(|j| mat_at(inputs[2].data(), j)).collect();
        let trans: Vec<_> = (0..k).map(|j| vec_at(inputs[3].data(), j)).collect();
        let pivots: Vec<_> = (0..k).map(|j| vec_at(inputs[4].data(), j)).collect();
        let masks = inputs[1].data();

        let mut gx = Tensor::zeros(inputs[0].shape());
        let mut gm = Tensor::zeros(inputs[1].shape());
        let mut gr = Tensor::zeros(inputs[2].shape());
        let mut gt = Tensor::zeros(inputs[3].shape());
        let mut gp = Tensor::zeros(inputs[4].shape());

        for (i, px) in inputs[0].data().chunks(3).enumerate() {
            let x = Vector3::new(px[0], px[1], px[2]);
            let go = vec_at(g.data(), i);
            let mut gxi = go;
            for j in 0..k {
                let m = masks[i * k + j];
                let centered = x - pivots[j];
                let rt_go = rots[j].transpose() * go;
                gxi += m * (rt_go - go);
                gm.data_mut()[i * k + j] = go.dot(&(rots[j] * centered + trans[j] - x));
                if m != 0.0 {
                    add_mat(gr.data_mut(), j, &(m * go * centered.transpose()));
                    add_vec(gt.data_mut(), j, &(m * go));
                    add_vec(gp.data_mut(), j, &(-m * rt_go));
                }
            }
            gx.data_mut()[3 * i..3 * i + 3].copy_from_slice(gxi.as_slice());
        }
        [gx, gm, gr, gt, gp].into_iter().zip(needs).map(|(t, &n)| n.then_some(t)).collect()
    }
}

/// `R(X − p) + t` applied to every point. Inputs: points `[h, w, 3]`,
/// rotation `[3, 3]`, translation `[3]`, pivot `[3]`.
#[derive(Debug, Clone, Copy)]
pub struct RigidTransform;

impl Primitive for RigidTransform {
    fn name(&self) -> &'static str {
        RIGID_TRANSFORM
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(RIGID_TRANSFORM, inputs, 4)?;
        points_dims(RIGID_TRANSFORM, inputs[0])?;
        if inputs[1].shape() != [3, 3] || inputs[2].shape() != [3] || inputs[3].shape() != [3] {
            return Err(AutodiffError::shape(RIGID_TRANSFORM, "expected rotation [3, 3], translation [3], pivot [3]"));
        }
        let r = mat_at(inputs[1].data(), 0);
        let t = vec_at(inputs[2].data(), 0);
        let p = vec_at(inputs[3].data(), 0);
        let mut out = inputs[0].clone();
        for px in out.data_mut().chunks_mut(3) {
            let y = r * (Vector3::new(px[0], px[1], px[2]) - p) + t;
            px.copy_from_slice(y.as_slice());
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let r = mat_at(inputs[1].data(), 0);
        let p = vec_at(inputs[3].data(), 0);
        let rt = r.transpose();
        let mut gx = Tensor::zeros(inputs[0].shape());
        let mut gr = Matrix3::zeros();
        let mut gsum = Vector3::zeros();
        for (i, px) in inputs[0].data().chunks(3).enumerate() {
            let go = vec_at(g.data(), i);
            let centered = Vector3::new(px[0], px[1], px[2]) - p;
            gx.data_mut()[3 * i..3 * i + 3].copy_from_slice((rt * go).as_slice());
            gr += go * centered.transpose();
            gsum += go;
        }
        let mut gr_t = Tensor::zeros(&[3, 3]);
        add_mat(gr_t.data_mut(), 0, &gr);
        let gt = Tensor::from_slice(&[3], gsum.as_slice());
        let gp = Tensor::from_slice(&[3], (-(rt * gsum)).as_slice());
        [gx, gr_t, gt, gp].into_iter().zip(needs).map(|(t, &n)| n.then_some(t)).collect()
    }
}

/// Projects transformed points `[h, w, 3]` and returns the pixel-unit flow
/// `[h, w, 2]` relative to each pixel's own center.
#[derive(Debug, Clone, Copy)]
pub struct ProjectFlow(pub CameraIntrinsics);

impl Primitive for ProjectFlow {
    fn name(&self) -> &'static str {
        PROJECT_FLOW
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(PROJECT_FLOW, inputs, 1)?;
        let (h, w) = points_dims(PROJECT_FLOW, inputs[0])?;
        let k = &self.0;
        let pts = inputs[0].data();
        let mut data = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            let yn = pixel_to_normalized(y, h);
            for x in 0..w {
                let i = y * w + x;
                let z = pts[3 * i + 2].max(Z_MIN);
                let u = (k.f * pts[3 * i] / z + k.cx - pixel_to_normalized(x, w)) * w as f64;
                let v = (k.f * pts[3 * i + 1] / z + k.cy - yn) * h as f64;
                data.push(u);
                data.push(v);
            }
        }
        Ok(Tensor::new(vec![h, w, 2], data))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (h, w) = points_dims(PROJECT_FLOW, inputs[0]).expect("validated in forward");
        let f = self.0.f;
        let pts = inputs[0].data();
        let mut out = Tensor::zeros(inputs[0].shape());
        let go = out.data_mut();
        for i in 0..h * w {
            let (px, py, pz) = (pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]);
            let (gu, gv) = (g.data()[2 * i] * w as f64, g.data()[2 * i + 1] * h as f64);
            let z = pz.max(Z_MIN);
            go[3 * i] = gu * f / z;
            go[3 * i + 1] = gv * f / z;
            if pz >= Z_MIN {
                go[3 * i + 2] = -(gu * f * px + gv * f * py) / (z * z);
            }
        }
        vec![Some(out)]
    }
}
