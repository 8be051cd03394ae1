//! Pinhole forward model: depth → point cloud → object motions → camera
//! motion → reprojection → flow.
//!
//! Pixel `(x, y)` has its center at normalized coordinates
//! `((x + 0.5)/w, (y + 0.5)/h)`. Flow is reported in pixels.

pub mod ops;

use nalgebra::{Matrix3, Vector3};

use crate::types::{CameraIntrinsics, DepthMap, FlowField, MotionMaskStack, PointCloud, RigidMotion};

/// Depths below this are clamped before the projective division.
pub const Z_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("sine {value} of Euler angle {axis} lies outside [-1, 1]")]
    SineDomain { axis: char, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Normalized image coordinate of a pixel center.
#[inline]
pub fn pixel_to_normalized(pixel: usize, extent: usize) -> f64 {
    (pixel as f64 + 0.5) / extent as f64
}

/// Ray scaled to depth `d` through normalized image point `(xn, yn)`.
#[inline]
pub fn backproject_point(xn: f64, yn: f64, depth: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new(depth / k.f * (xn - k.cx), depth / k.f * (yn - k.cy), depth)
}

/// Normalized image coordinates of a 3D point; `Z` is clamped at [`Z_MIN`].
#[inline]
pub fn project_point(p: &Vector3<f64>, k: &CameraIntrinsics) -> (f64, f64) {
    let z = p.z.max(Z_MIN);
    (k.f * p.x / z + k.cx, k.f * p.y / z + k.cy)
}

#[inline]
fn cos_from_sin(s: f64) -> f64 {
    (1.0 - s * s).max(0.0).sqrt()
}

pub fn rot_x(s: f64) -> Matrix3<f64> {
    let c = cos_from_sin(s);
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(s: f64) -> Matrix3<f64> {
    let c = cos_from_sin(s);
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(s: f64) -> Matrix3<f64> {
    let c = cos_from_sin(s);
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn check_sines(sines: [f64; 3]) -> Result<(), GeometryError> {
    for (axis, value) in ['x', 'y', 'z'].into_iter().zip(sines) {
        if !(-1.0..=1.0).contains(&value) {
            return Err(GeometryError::SineDomain { axis, value });
        }
    }
    Ok(())
}

/// `R = R_x(α)·R_y(β)·R_z(γ)` from `(sin α, sin β, sin γ)`, with every
/// cosine taken non-negative.
pub fn rotation_from_sines(sin_alpha: f64, sin_beta: f64, sin_gamma: f64) -> Result<Matrix3<f64>, GeometryError> {
    check_sines([sin_alpha, sin_beta, sin_gamma])?;
    Ok(rot_x(sin_alpha) * rot_y(sin_beta) * rot_z(sin_gamma))
}

/// Derivatives of the rotation with respect to each of the three sines.
pub(crate) fn rotation_sine_jacobians(s: [f64; 3]) -> [Matrix3<f64>; 3] {
    // d cos / d sin = -sin / cos; cos is floored to keep the derivative finite at ±1.
    let dc = |s: f64| -s / cos_from_sin(s).max(1e-12);
    let (rx, ry, rz) = (rot_x(s[0]), rot_y(s[1]), rot_z(s[2]));
    let d0 = dc(s[0]);
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, d0, -1.0, 0.0, 1.0, d0);
    let d1 = dc(s[1]);
    let dry = Matrix3::new(d1, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, d1);
    let d2 = dc(s[2]);
    let drz = Matrix3::new(d2, -1.0, 0.0, 1.0, d2, 0.0, 0.0, 0.0, 0.0);
    [drx * ry * rz, rx * dry * rz, rx * ry * drz]
}

impl RigidMotion {
    pub fn rotation(&self) -> Result<Matrix3<f64>, GeometryError> {
        let [a, b, c] = self.sin_angles;
        rotation_from_sines(a, b, c)
    }

    /// `R(X − p) + t`.
    pub fn apply(&self, x: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
        Ok(self.rotation()? * (x - self.p()) + self.t())
    }
}

/// Point cloud of a depth map under the pinhole model.
pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics) -> PointCloud {
    let (w, h) = (depth.width, depth.height);
    let mut points = Vec::with_capacity(w * h);
    for y in 0..h {
        let yn = pixel_to_normalized(y, h);
        for x in 0..w {
            let xn = pixel_to_normalized(x, w);
            points.push(backproject_point(xn, yn, depth.get(x, y), k));
        }
    }
    PointCloud { width: w, height: h, points }
}

/// `X' = X + Σ_k m_k·(R_k(X − p_k) + t_k − X)`.
pub fn apply_object_motions(
    cloud: &PointCloud,
    masks: &MotionMaskStack,
    motions: &[RigidMotion],
) -> Result<PointCloud, GeometryError> {
    if masks.width != cloud.width || masks.height != cloud.height {
        return Err(GeometryError::Shape(format!(
            "masks are {}x{}, point cloud is {}x{}",
            masks.width, masks.height, cloud.width, cloud.height
        )));
    }
    if masks.k != motions.len() {
        return Err(GeometryError::Shape(format!("{} masks but {} object motions", masks.k, motions.len())));
    }
    let rotations = motions.iter().map(RigidMotion::rotation).collect::<Result<Vec<_>, _>>()?;
    let points = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut out = *x;
            for (k, (m, r)) in motions.iter().zip(&rotations).enumerate() {
                let weight = masks.get(i, k);
                if weight != 0.0 {
                    out += weight * (r * (x - m.p()) + m.t() - x);
                }
            }
            out
        })
        .collect();
    Ok(PointCloud { width: cloud.width, height: cloud.height, points })
}

/// `X'' = R_c(X' − p_c) + t_c`.
pub fn apply_camera_motion(cloud: &PointCloud, camera: &RigidMotion) -> Result<PointCloud, GeometryError> {
    let r = camera.rotation()?;
    let (p, t) = (camera.p(), camera.t());
    Ok(PointCloud {
        width: cloud.width,
        height: cloud.height,
        points: cloud.points.iter().map(|x| r * (x - p) + t).collect(),
    })
}

/// Normalized image coordinates of every point, and how many points were
/// clamped at [`Z_MIN`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<(f64, f64)>,
    pub clamped: usize,
}

pub fn project(cloud: &PointCloud, k: &CameraIntrinsics) -> Projection {
    let clamped = cloud.points.iter().filter(|p| p.z < Z_MIN).count();
    Projection { coords: cloud.points.iter().map(|p| project_point(p, k)).collect(), clamped }
}

/// Dense flow induced by depth, object motions and camera motion.
pub fn compute_flow(
    depth: &DepthMap,
    masks: &MotionMaskStack,
    motions: &[RigidMotion],
    camera: &RigidMotion,
    k: &CameraIntrinsics,
) -> Result<FlowField, GeometryError> {
    let (w, h) = (depth.width, depth.height);
    let cloud = backproject(depth, k);
    let moved = apply_camera_motion(&apply_object_motions(&cloud, masks, motions)?, camera)?;
    let projected = project(&moved, k);
    // Differencing against the reprojected source (rather than the pixel grid)
    // makes zero motion give exactly zero flow.
    let origin = project(&cloud, k);
    let mut flow = FlowField::zeros(w, h);
    for i in 0..w * h {
        let ((xn, yn), (x0, y0)) = (projected.coords[i], origin.coords[i]);
        flow.u[i] = (xn - x0) * w as f64;
        flow.v[i] = (yn - y0) * h as f64;
        flow.w[i] = moved.points[i].z - cloud.points[i].z;
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    const K: CameraIntrinsics = CameraIntrinsics { f: 1.0, cx: 0.5, cy: 0.5 };

    #[test]
    fn backproject_principal_ray() {
        assert_eq!(backproject_point(0.5, 0.5, 2.0, &K), Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(backproject_point(0.75, 0.5, 1.0, &K), Vector3::new(0.25, 0.0, 1.0));
    }

    #[test]
    fn project_hand_cases() {
        assert_eq!(project_point(&Vector3::new(0.0, 0.0, 5.0), &K), (0.5, 0.5));
        let (x, y) = project_point(&Vector3::new(0.2, 0.0, 2.0), &K);
        assert!((x - 0.6).abs() < 1e-15 && (y - 0.5).abs() < 1e-15);
    }

    #[test]
    fn project_clamps_small_depth() {
        let cloud =
            PointCloud { width: 2, height: 1, points: vec![Vector3::new(1e-3, 0.0, 0.0), Vector3::new(0.0, 0.0, 1.0)] };
        let p = project(&cloud, &K);
        assert_eq!(p.clamped, 1);
        assert!((p.coords[0].0 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rotation_identity_and_quarter_turn() {
        assert_eq!(rotation_from_sines(0.0, 0.0, 0.0).unwrap(), Matrix3::identity());
        let r = rotation_from_sines(1.0, 0.0, 0.0).unwrap();
        let v = r * Vector3::new(0.0, 1.0, 0.0);
        assert!((v - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn rotation_rejects_out_of_domain() {
        assert_eq!(rotation_from_sines(0.0, 1.5, 0.0), Err(GeometryError::SineDomain { axis: 'y', value: 1.5 }));
    }

    #[test]
    fn object_motion_zero_masks_is_identity() {
        let depth = DepthMap::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let cloud = backproject(&depth, &K);
        let masks = MotionMaskStack::zeros(3, 2, 2);
        let motions = [RigidMotion::new([0.3, 0.1, -0.2], [1.0, 2.0, 3.0], [0.5, 0.5, 0.5]); 2];
        assert_eq!(apply_object_motions(&cloud, &masks, &motions).unwrap(), cloud);
    }

    #[test]
    fn object_motion_translations_add() {
        let depth = DepthMap::filled(2, 2, 3.0);
        let cloud = backproject(&depth, &K);
        let one = MotionMaskStack::from_layers(2, 2, &[vec![1.0; 4]]);
        let moved = apply_object_motions(&cloud, &one, &[RigidMotion::translation([1.0, 0.0, 0.0])]).unwrap();
        for (a, b) in moved.points.iter().zip(&cloud.points) {
            assert!((a - b - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        }
        let two = MotionMaskStack::from_layers(2, 2, &[vec![1.0; 4], vec![1.0; 4]]);
        let motions = [RigidMotion::translation([1.0, 0.0, 0.0]), RigidMotion::translation([0.0, 1.0, 0.0])];
        let moved = apply_object_motions(&cloud, &two, &motions).unwrap();
        for (a, b) in moved.points.iter().zip(&cloud.points) {
            assert!((a - b - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn object_motion_shape_mismatch() {
        let cloud = backproject(&DepthMap::filled(2, 2, 1.0), &K);
        let masks = MotionMaskStack::zeros(2, 2, 2);
        assert!(matches!(
            apply_object_motions(&cloud, &masks, &[RigidMotion::identity()]),
            Err(GeometryError::Shape(_))
        ));
        let masks = MotionMaskStack::zeros(3, 2, 1);
        assert!(apply_object_motions(&cloud, &masks, &[RigidMotion::identity()]).is_err());
    }

    #[test]
    fn camera_motion_cases() {
        let cloud = backproject(&DepthMap::new(2, 1, vec![1.0, 2.0]), &K);
        assert_eq!(apply_camera_motion(&cloud, &RigidMotion::identity()).unwrap(), cloud);
        let moved = apply_camera_motion(&cloud, &RigidMotion::translation([0.0, 0.0, 1.0])).unwrap();
        for (a, b) in moved.points.iter().zip(&cloud.points) {
            assert_eq!(a.z, b.z + 1.0);
            assert_eq!((a.x, a.y), (b.x, b.y));
        }
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let depth = DepthMap::filled(5, 4, 2.5);
        let flow = compute_flow(
            &depth,
            &MotionMaskStack::zeros(5, 4, 3),
            &[RigidMotion::identity(); 3],
            &RigidMotion::identity(),
            &K,
        )
        .unwrap();
        assert!(flow.u.iter().chain(&flow.v).chain(&flow.w).all(|&v| v == 0.0));
    }

    #[test]
    fn lateral_translation_gives_uniform_flow() {
        let (w, h) = (8, 6);
        let depth = DepthMap::filled(w, h, 2.0);
        let cam = RigidMotion::translation([0.2, 0.0, 0.0]);
        let flow = compute_flow(&depth, &MotionMaskStack::zeros(w, h, 0), &[], &cam, &K).unwrap();
        for i in 0..w * h {
            assert!((flow.u[i] - 0.1 * w as f64).abs() < 1e-12);
            assert!(flow.v[i].abs() < 1e-12);
            assert!(flow.w[i].abs() < 1e-12);
        }
    }
}
