//! Grids and motion parameters shared by every stage of the pipeline.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// `h×w×c` intensities in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        Self { width, height, channels, data }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w, c) = t.grid_dims().expect("image tensor must be a grid");
        Self::new(w, h, c, t.data().to_vec())
    }
}

/// Per-pixel depth along the optical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w, c) = t.grid_dims().expect("depth tensor must be a grid");
        assert_eq!(c, 1);
        Self::new(w, h, t.data().to_vec())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.width, self.height, self.data.iter().map(|d| d * factor).collect())
    }
}

/// `K` soft membership grids, stored `[h, w, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMaskStack {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl MotionMaskStack {
    pub fn new(width: usize, height: usize, k: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * k);
        Self { width, height, k, data }
    }

    pub fn zeros(width: usize, height: usize, k: usize) -> Self {
        Self::new(width, height, k, vec![0.0; width * height * k])
    }

    /// Builds a stack from one grid per mask.
    pub fn from_layers(width: usize, height: usize, layers: &[Vec<f64>]) -> Self {
        let k = layers.len();
        let mut data = vec![0.0; width * height * k];
        for (j, layer) in layers.iter().enumerate() {
            assert_eq!(layer.len(), width * height);
            for (p, v) in layer.iter().enumerate() {
                data[p * k + j] = *v;
            }
        }
        Self::new(width, height, k, data)
    }

    pub fn get(&self, pixel: usize, mask: usize) -> f64 {
        self.data[pixel * self.k + mask]
    }

    pub fn layer(&self, mask: usize) -> Vec<f64> {
        (0..self.width * self.height).map(|p| self.get(p, mask)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.k], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w, k) = t.grid_dims().expect("mask tensor must be a grid");
        Self::new(w, h, k, t.data().to_vec())
    }
}

/// Pixel displacement `(U, V)` plus the depth-direction scene flow `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, u: vec![0.0; n], v: vec![0.0; n], w: vec![0.0; n] }
    }

    /// `[h, w, 2]` tensor of `(U, V)`.
    pub fn uv_tensor(&self) -> Tensor {
        let data = self.u.iter().zip(&self.v).flat_map(|(u, v)| [*u, *v]).collect();
        Tensor::new(vec![self.height, self.width, 2], data)
    }

    pub fn from_uv_tensor(uv: &Tensor) -> Self {
        let (h, w, c) = uv.grid_dims().expect("flow tensor must be a grid");
        assert_eq!(c, 2);
        let u = uv.data().iter().step_by(2).copied().collect();
        let v = uv.data().iter().skip(1).step_by(2).copied().collect();
        Self { width: w, height: h, u, v, w: vec![0.0; w * h] }
    }
}

/// Normalized pinhole intrinsics: `x/w = f·X/Z + c_x`, `y/h = f·Y/Z + c_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { f: 1.0, cx: 0.5, cy: 0.5 }
    }
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64) -> Self {
        Self { f, cx, cy }
    }

    /// Converts a focal length given in pixels for an image of width `width`.
    pub fn from_pixel_focal(focal_px: f64, width: usize, cx: f64, cy: f64) -> Self {
        Self::new(focal_px / width as f64, cx, cy)
    }
}

/// Rigid motion parameterized by the sines of its three Euler angles, a
/// translation and a rotation pivot: `X ↦ R(X − p) + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidMotion {
    pub sin_angles: [f64; 3],
    pub translation: [f64; 3],
    pub pivot: [f64; 3],
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { translation: t, ..Self::default() }
    }

    pub fn new(sin_angles: [f64; 3], translation: [f64; 3], pivot: [f64; 3]) -> Self {
        Self { sin_angles, translation, pivot }
    }

    pub fn t(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn p(&self) -> Vector3<f64> {
        Vector3::from(self.pivot)
    }
}

/// Per-pixel 3D points in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Tensor::new(vec![self.height, self.width, 3], data)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w, c) = t.grid_dims().expect("point tensor must be a grid");
        assert_eq!(c, 3);
        let points = t.data().chunks(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect();
        Self { width: w, height: h, points }
    }
}
