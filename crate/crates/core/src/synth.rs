//! Procedural rigid scenes with exact ground truth.
//!
//! A scene is a textured background plane plus fronto-parallel rectangular
//! patches. Both frames are rendered by ray casting against the moved
//! layers, so the rendered second frame, its depth and the ground-truth flow
//! agree up to interpolation error. Textures are sums of random sinusoids
//! attached to each layer's surface.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{compute_flow, pixel_to_normalized, project_point, GeometryError, Z_MIN};
use crate::types::{CameraIntrinsics, DepthMap, FlowField, Image, MotionMaskStack, RigidMotion};
use crate::warping::in_bounds;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene `{scene}`: {reason}")]
    InvalidSpec { scene: String, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Background surface `Z = depth + slope_x·X + slope_y·Y` in frame-t camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub depth: f64,
    pub slope_x: f64,
    pub slope_y: f64,
}

/// Rectangular patch at constant depth covering `rect = [x0, y0, x1, y1]` in
/// normalized frame-t image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub rect: [f64; 4],
    pub depth: f64,
    pub motion: RigidMotion,
}

/// Band of spatial frequencies (cycles per image) used for textures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub waves: usize,
    pub min_cycles: f64,
    pub max_cycles: f64,
    /// Gain before squashing into `[0, 1]`; larger means higher contrast.
    pub contrast: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self { waves: 6, min_cycles: 1.5, max_cycles: 5.0, contrast: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub background: Background,
    pub objects: Vec<ObjectSpec>,
    pub camera: RigidMotion,
    pub texture_seed: u64,
    pub texture: TextureSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGroundTruth {
    pub spec: SceneSpec,
    pub frame_t: Image,
    pub frame_tp1: Image,
    pub depth_t: DepthMap,
    pub depth_tp1: DepthMap,
    pub flow: FlowField,
    /// Binary masks, one layer per object.
    pub masks: MotionMaskStack,
    pub camera: RigidMotion,
    pub objects: Vec<RigidMotion>,
    /// Pixels whose surface point is hidden by a nearer layer in frame t+1.
    pub occlusion: Vec<bool>,
}

impl SceneGroundTruth {
    pub fn object_masks(&self) -> Vec<Vec<bool>> {
        (0..self.masks.k).map(|k| self.masks.layer(k).iter().map(|&m| m > 0.5).collect()).collect()
    }

    /// Camera motion as a rotation and an effective translation `t − R·p`.
    pub fn camera_pose(&self) -> Result<(Matrix3<f64>, Vector3<f64>), GeometryError> {
        let r = self.camera.rotation()?;
        Ok((r, self.camera.t() - r * self.camera.p()))
    }

    /// Pixels whose flow target lies inside the image.
    pub fn in_bounds(&self) -> Vec<bool> {
        let w = self.flow.width;
        (0..self.flow.u.len())
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                in_bounds(x + self.flow.u[i], y + self.flow.v[i], w, self.flow.height)
            })
            .collect()
    }

    /// In-bounds and not occluded.
    pub fn visible(&self) -> Vec<bool> {
        self.in_bounds().into_iter().zip(&self.occlusion).map(|(b, &o)| b && !o).collect()
    }
}

#[derive(Debug, Clone)]
struct Wave {
    freq: (f64, f64),
    phase: f64,
    amplitude: f64,
}

#[derive(Debug, Clone)]
struct Texture {
    channels: Vec<Vec<Wave>>,
    contrast: f64,
}

impl Texture {
    fn random(spec: &TextureSpec, rng: &mut ChaCha8Rng) -> Self {
        let amplitude = (2.0 / spec.waves.max(1) as f64).sqrt();
        let channels = (0..3)
            .map(|_| {
                (0..spec.waves)
                    .map(|_| {
                        let angle = rng.random_range(0.0..PI);
                        let cycles = rng.random_range(spec.min_cycles..=spec.max_cycles);
                        Wave {
                            freq: (cycles * angle.cos(), cycles * angle.sin()),
                            phase: rng.random_range(0.0..2.0 * PI),
                            amplitude,
                        }
                    })
                    .collect()
            })
            .collect();
        Self { channels, contrast: spec.contrast }
    }

    fn sample(&self, u: f64, v: f64, out: &mut [f64]) {
        for (c, waves) in self.channels.iter().enumerate() {
            let s: f64 =
                waves.iter().map(|w| w.amplitude * (2.0 * PI * (w.freq.0 * u + w.freq.1 * v) + w.phase).sin()).sum();
            out[c] = 0.5 + 0.5 * (self.contrast * s).tanh();
        }
    }
}

/// A planar surface `n·X = offset` in frame-t coordinates, moved into frame
/// t+1 by `X ↦ M·X + b`.
struct Layer {
    normal: Vector3<f64>,
    offset: f64,
    rect: Option<[f64; 4]>,
    texture: Texture,
    rotation: Matrix3<f64>,
    shift: Vector3<f64>,
}

struct Hit {
    depth: f64,
    layer: usize,
    /// Surface point in frame-t coordinates.
    origin: Vector3<f64>,
}

struct Renderer {
    layers: Vec<Layer>,
    k: CameraIntrinsics,
}

impl Renderer {
    /// Nearest layer along the ray through normalized point `(xn, yn)`, in
    /// frame t (`moved = false`) or frame t+1.
    fn cast(&self, xn: f64, yn: f64, moved: bool) -> Option<Hit> {
        let ray = Vector3::new((xn - self.k.cx) / self.k.f, (yn - self.k.cy) / self.k.f, 1.0);
        let mut best: Option<Hit> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (m, b) = if moved { (layer.rotation, layer.shift) } else { (Matrix3::identity(), Vector3::zeros()) };
            // n·Mᵀ(s·ray − b) = offset
            let mn = m * layer.normal;
            let denom = mn.dot(&ray);
            if denom.abs() < 1e-12 {
                continue;
            }
            let s = (layer.offset + mn.dot(&b)) / denom;
            if s <= Z_MIN {
                continue;
            }
            let origin = m.transpose() * (ray * s - b);
            if let Some([x0, y0, x1, y1]) = layer.rect {
                let (u, v) = project_point(&origin, &self.k);
                if !(u >= x0 && u < x1 && v >= y0 && v < y1) {
                    continue;
                }
            }
            if best.as_ref().is_none_or(|h| s < h.depth) {
                best = Some(Hit { depth: s, layer: i, origin });
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, out: &mut [f64]) {
        let (u, v) = project_point(&hit.origin, &self.k);
        self.layers[hit.layer].texture.sample(u, v, out);
    }
}

impl SceneSpec {
    fn invalid(&self, reason: impl Into<String>) -> SynthError {
        SynthError::InvalidSpec { scene: self.name.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width < 2 || self.height < 2 {
            return Err(self.invalid("image must be at least 2×2"));
        }
        if !(self.intrinsics.f > 0.0) {
            return Err(self.invalid("focal length must be positive"));
        }
        if !(self.background.depth > Z_MIN) {
            return Err(self.invalid("background depth must exceed the minimum depth"));
        }
        let t = &self.texture;
        if t.waves == 0 || !(t.min_cycles > 0.0 && t.max_cycles >= t.min_cycles) || !(t.contrast > 0.0) {
            return Err(self.invalid("texture needs waves, a positive frequency band and contrast"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let [x0, y0, x1, y1] = o.rect;
            if !(x0 < x1 && y0 < y1) {
                return Err(self.invalid(format!("object {i} has an empty rectangle")));
            }
            if !(o.depth > Z_MIN) {
                return Err(self.invalid(format!("object {i} depth must exceed the minimum depth")));
            }
            o.motion.rotation()?;
        }
        self.camera.rotation()?;
        Ok(())
    }

    fn renderer(&self, seed: u64) -> Result<Renderer, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed);
        let rc = self.camera.rotation()?;
        let cam_shift = self.camera.t() - rc * self.camera.p();
        let bg = &self.background;
        let mut layers = vec![Layer {
            normal: Vector3::new(-bg.slope_x, -bg.slope_y, 1.0),
            offset: bg.depth,
            rect: None,
            texture: Texture::random(&self.texture, &mut rng),
            rotation: rc,
            shift: cam_shift,
        }];
        for o in &self.objects {
            let rk = o.motion.rotation()?;
            layers.push(Layer {
                normal: Vector3::z(),
                offset: o.depth,
                rect: Some(o.rect),
                texture: Texture::random(&self.texture, &mut rng),
                rotation: rc * rk,
                shift: rc * (o.motion.t() - rk * o.motion.p()) + cam_shift,
            });
        }
        Ok(Renderer { layers, k: self.intrinsics })
    }
}

/// Renders both frames and derives every ground-truth quantity.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneGroundTruth, SynthError> {
    spec.validate()?;
    let renderer = spec.renderer(seed)?;
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let k = spec.objects.len();

    let mut frame_t = Image::filled(w, h, 3, 0.0);
    let mut frame_tp1 = Image::filled(w, h, 3, 0.0);
    let mut depth_t = vec![0.0; n];
    let mut depth_tp1 = vec![0.0; n];
    let mut layers = vec![0usize; n];
    for y in 0..h {
        let yn = pixel_to_normalized(y, h);
        for x in 0..w {
            let xn = pixel_to_normalized(x, w);
            let i = y * w + x;
            let hit = renderer
                .cast(xn, yn, false)
                .ok_or_else(|| spec.invalid(format!("no surface visible at pixel ({x}, {y}) in frame t")))?;
            renderer.shade(&hit, &mut frame_t.data[3 * i..3 * i + 3]);
            depth_t[i] = hit.depth;
            layers[i] = hit.layer;
            let moved = renderer
                .cast(xn, yn, true)
                .ok_or_else(|| spec.invalid(format!("no surface visible at pixel ({x}, {y}) in frame t+1")))?;
            renderer.shade(&moved, &mut frame_tp1.data[3 * i..3 * i + 3]);
            depth_tp1[i] = moved.depth;
        }
    }

    let depth_t = DepthMap::new(w, h, depth_t);
    let masks = MotionMaskStack::from_layers(
        w,
        h,
        &(1..=k).map(|l| layers.iter().map(|&m| if m == l { 1.0 } else { 0.0 }).collect()).collect::<Vec<_>>(),
    );
    let objects: Vec<RigidMotion> = spec.objects.iter().map(|o| o.motion).collect();
    let flow = compute_flow(&depth_t, &masks, &objects, &spec.camera, &spec.intrinsics)?;

    let mut occlusion = vec![false; n];
    for (i, occluded) in occlusion.iter_mut().enumerate() {
        let (x, y) = (i % w, i / w);
        let xn = pixel_to_normalized(x, w) + flow.u[i] / w as f64;
        let yn = pixel_to_normalized(y, h) + flow.v[i] / h as f64;
        let target_depth = depth_t.data[i] + flow.w[i];
        if let Some(hit) = renderer.cast(xn, yn, true) {
            *occluded = hit.layer != layers[i] && hit.depth < target_depth - 1e-9 * target_depth.abs().max(1.0);
        }
    }

    let gt = SceneGroundTruth {
        spec: spec.clone(),
        frame_t,
        frame_tp1,
        depth_t,
        depth_tp1: DepthMap::new(w, h, depth_tp1),
        flow,
        masks,
        camera: spec.camera,
        objects,
        occlusion,
    };
    let inside = gt.in_bounds().iter().filter(|&&b| b).count();
    if (inside as f64) < 0.9 * n as f64 {
        return Err(spec.invalid(format!("only {inside} of {n} pixels stay in bounds; motions are too large")));
    }
    Ok(gt)
}

fn base_spec(name: &str, width: usize, height: usize) -> SceneSpec {
    SceneSpec {
        name: name.to_string(),
        width,
        height,
        intrinsics: CameraIntrinsics::default(),
        background: Background { depth: 5.0, slope_x: 0.3, slope_y: 0.2 },
        objects: Vec::new(),
        camera: RigidMotion::identity(),
        texture_seed: 7,
        texture: TextureSpec::default(),
    }
}

/// Six scenes covering every stage of the forward model, at `width×height`.
pub fn standard_suite_sized(width: usize, height: usize) -> Vec<SceneSpec> {
    let deep_slant = Background { depth: 4.0, slope_x: 1.0, slope_y: 0.5 };
    let object = |rect, depth, motion| ObjectSpec { rect, depth, motion };
    vec![
        base_spec("static", width, height),
        SceneSpec {
            background: deep_slant,
            camera: RigidMotion::translation([0.12, 0.04, 0.15]),
            texture_seed: 11,
            ..base_spec("cam-translate", width, height)
        },
        SceneSpec {
            camera: RigidMotion::new([0.01, 0.03, 0.005], [0.0; 3], [0.0; 3]),
            texture_seed: 13,
            ..base_spec("cam-rotate", width, height)
        },
        SceneSpec {
            objects: vec![object([0.3, 0.3, 0.65, 0.7], 2.5, RigidMotion::translation([0.08, 0.04, 0.0]))],
            texture_seed: 17,
            ..base_spec("one-object", width, height)
        },
        SceneSpec {
            objects: vec![
                object([0.1, 0.15, 0.4, 0.45], 2.5, RigidMotion::translation([0.06, 0.05, 0.0])),
                object(
                    [0.55, 0.5, 0.9, 0.85],
                    3.0,
                    // Rotation about the patch center: t = p + shift.
                    RigidMotion::new([0.0, 0.0, 0.05], [0.625, 0.525, 3.0], [0.675, 0.525, 3.0]),
                ),
            ],
            texture_seed: 19,
            ..base_spec("two-objects", width, height)
        },
        SceneSpec {
            objects: vec![object([0.35, 0.3, 0.7, 0.7], 2.5, RigidMotion::translation([-0.08, 0.05, 0.0]))],
            camera: RigidMotion::translation([0.1, 0.0, 0.05]),
            texture_seed: 23,
            ..base_spec("object+camera", width, height)
        },
    ]
}

/// The default 64×64 suite.
pub fn standard_suite() -> Vec<SceneSpec> {
    standard_suite_sized(64, 64)
}

/// Looks up a scene of the default suite by name.
pub fn suite_scene(name: &str) -> Option<SceneSpec> {
    standard_suite().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_scene_has_no_motion() {
        let gt = generate_scene(&suite_scene("static").unwrap(), 0).unwrap();
        assert_eq!(gt.frame_t, gt.frame_tp1);
        assert!(gt.flow.u.iter().chain(&gt.flow.v).chain(&gt.flow.w).all(|&v| v == 0.0));
        assert!(gt.occlusion.iter().all(|&o| !o));
    }

    #[test]
    fn deterministic() {
        let spec = suite_scene("two-objects").unwrap();
        assert_eq!(generate_scene(&spec, 3).unwrap(), generate_scene(&spec, 3).unwrap());
        assert_ne!(generate_scene(&spec, 3).unwrap().frame_t, generate_scene(&spec, 4).unwrap().frame_t);
    }

    #[test]
    fn one_object_mask_covers_patch() {
        let spec = suite_scene("one-object").unwrap();
        let gt = generate_scene(&spec, 0).unwrap();
        let [x0, y0, x1, y1] = spec.objects[0].rect;
        for (i, &m) in gt.object_masks()[0].iter().enumerate() {
            let xn = pixel_to_normalized(i % spec.width, spec.width);
            let yn = pixel_to_normalized(i / spec.width, spec.height);
            assert_eq!(m, xn >= x0 && xn < x1 && yn >= y0 && yn < y1);
        }
    }

    #[test]
    fn suite_names() {
        let names: Vec<String> = standard_suite().into_iter().map(|s| s.name).collect();
        for n in ["static", "cam-translate", "cam-rotate", "one-object", "two-objects", "object+camera"] {
            assert!(names.iter().any(|m| m == n));
        }
    }

    #[test]
    fn rejects_runaway_motion() {
        let spec = SceneSpec { camera: RigidMotion::translation([3.0, 0.0, 0.0]), ..base_spec("runaway", 16, 16) };
        assert!(matches!(generate_scene(&spec, 0), Err(SynthError::InvalidSpec { .. })));
    }
}
