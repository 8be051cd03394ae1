//! Backward warping by bilinear sampling.
//!
//! Pixel centers sit at integer coordinates. A sample at `(x, y)` is valid
//! when `0 ≤ x ≤ w−1` and `0 ≤ y ≤ h−1`, i.e. every neighbor carrying
//! nonzero weight lies inside the image. Invalid samples read as 0.

use crate::autodiff::{arity, AutodiffError, Primitive, Tensor};
use crate::types::{FlowField, Image};

pub const BILINEAR_SAMPLE: &str = "bilinear_sample";

/// Continuous sampling positions, one per pixel of an `h×w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub width: usize,
    pub height: usize,
    pub positions: Vec<(f64, f64)>,
}

impl SampleGrid {
    pub fn identity(width: usize, height: usize) -> Self {
        let positions = (0..height).flat_map(|y| (0..width).map(move |x| (x as f64, y as f64))).collect();
        Self { width, height, positions }
    }

    /// `(x + U, y + V)` for every pixel.
    pub fn from_flow(flow: &FlowField) -> Self {
        let mut grid = Self::identity(flow.width, flow.height);
        for (i, pos) in grid.positions.iter_mut().enumerate() {
            pos.0 += flow.u[i];
            pos.1 += flow.v[i];
        }
        grid
    }

    fn from_uv(uv: &Tensor) -> Self {
        let (h, w, _) = uv.grid_dims().expect("flow must be a grid");
        let mut grid = Self::identity(w, h);
        for (pos, d) in grid.positions.iter_mut().zip(uv.data().chunks(2)) {
            pos.0 += d[0];
            pos.1 += d[1];
        }
        grid
    }
}

#[inline]
pub fn in_bounds(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64
}

/// Top-left neighbor index and fractional offset along one axis.
#[inline]
fn cell(coord: f64, extent: usize) -> (usize, usize, f64) {
    if extent == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (coord.floor() as usize).min(extent - 2);
    (i0, i0 + 1, coord - i0 as f64)
}

/// Validity of `(x + U, y + V)` for a `[h, w, 2]` flow tensor.
pub fn flow_validity(uv: &Tensor) -> Vec<bool> {
    let grid = SampleGrid::from_uv(uv);
    grid.positions.iter().map(|&(x, y)| in_bounds(x, y, grid.width, grid.height)).collect()
}

/// Bilinear samples of a `[h, w]` or `[h, w, c]` source at every grid
/// position, plus the validity of each sample.
pub fn bilinear_sample(src: &Tensor, grid: &SampleGrid) -> (Tensor, Vec<bool>) {
    let (h, w, c) = src.grid_dims().expect("source must be a grid");
    assert!(h > 0 && w > 0, "empty source");
    let s = src.data();
    let mut out = vec![0.0; grid.positions.len() * c];
    let mut valid = Vec::with_capacity(grid.positions.len());
    for (i, &(xs, ys)) in grid.positions.iter().enumerate() {
        let ok = in_bounds(xs, ys, w, h);
        valid.push(ok);
        if !ok {
            continue;
        }
        let (x0, x1, fx) = cell(xs, w);
        let (y0, y1, fy) = cell(ys, h);
        let (w00, w10, w01, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
        for ch in 0..c {
            let at = |x: usize, y: usize| s[(y * w + x) * c + ch];
            out[i * c + ch] = w00 * at(x0, y0) + w10 * at(x1, y0) + w01 * at(x0, y1) + w11 * at(x1, y1);
        }
    }
    let mut shape = vec![grid.height, grid.width];
    if src.shape().len() == 3 {
        shape.push(c);
    }
    (Tensor::new(shape, out), valid)
}

/// `Î(x, y) = target(x + U, y + V)`: the target frame warped back onto the reference frame.
pub fn inverse_warp(target: &Image, flow: &FlowField) -> (Image, Vec<bool>) {
    assert_eq!((target.width, target.height), (flow.width, flow.height), "shape mismatch");
    let (sampled, valid) = bilinear_sample(&target.to_tensor(), &SampleGrid::from_flow(flow));
    (Image::from_tensor(&sampled), valid)
}

/// Differentiable bilinear sampling. Inputs: source `[h, w]` or `[h, w, c]`
/// and flow `[h, w, 2]` in pixels.
#[derive(Debug, Clone, Copy)]
pub struct BilinearSample;

impl Primitive for BilinearSample {
    fn name(&self) -> &'static str {
        BILINEAR_SAMPLE
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(BILINEAR_SAMPLE, inputs, 2)?;
        let (sh, sw, _) =
            inputs[0].grid_dims().ok_or_else(|| AutodiffError::shape(BILINEAR_SAMPLE, "source must be a grid"))?;
        if inputs[1].shape() != [sh, sw, 2] {
            return Err(AutodiffError::shape(
                BILINEAR_SAMPLE,
                format!("flow {:?} does not match source {sh}x{sw}", inputs[1].shape()),
            ));
        }
        Ok(bilinear_sample(inputs[0], &SampleGrid::from_uv(inputs[1])).0)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let src = inputs[0];
        let (h, w, c) = src.grid_dims().expect("validated in forward");
        let grid = SampleGrid::from_uv(inputs[1]);
        let s = src.data();
        let mut gsrc = needs[0].then(|| Tensor::zeros(src.shape()));
        let mut gflow = Tensor::zeros(inputs[1].shape());
        for (i, &(xs, ys)) in grid.positions.iter().enumerate() {
            if !in_bounds(xs, ys, w, h) {
                continue;
            }
            let (x0, x1, fx) = cell(xs, w);
            let (y0, y1, fy) = cell(ys, h);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                let go = g.data()[i * c + ch];
                let at = |x: usize, y: usize| s[(y * w + x) * c + ch];
                let (s00, s10, s01, s11) = (at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1));
                // Degenerate axes (extent 1) carry no derivative.
                if w > 1 {
                    gx += go * ((1.0 - fy) * (s10 - s00) + fy * (s11 - s01));
                }
                if h > 1 {
                    gy += go * ((1.0 - fx) * (s01 - s00) + fx * (s11 - s10));
                }
                if let Some(gs) = gsrc.as_mut() {
                    let d = gs.data_mut();
                    d[(y0 * w + x0) * c + ch] += go * (1.0 - fx) * (1.0 - fy);
                    d[(y0 * w + x1) * c + ch] += go * fx * (1.0 - fy);
                    d[(y1 * w + x0) * c + ch] += go * (1.0 - fx) * fy;
                    d[(y1 * w + x1) * c + ch] += go * fx * fy;
                }
            }
            gflow.data_mut()[2 * i] = gx;
            gflow.data_mut()[2 * i + 1] = gy;
        }
        vec![gsrc, needs[1].then_some(gflow)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Tensor {
        Tensor::new(vec![h, w], (0..w * h).map(|i| (i * 7 % 11) as f64 / 10.0).collect())
    }

    #[test]
    fn identity_grid_reproduces_source() {
        let src = ramp(5, 4);
        let (out, valid) = bilinear_sample(&src, &SampleGrid::identity(5, 4));
        assert_eq!(out, src);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn unit_column_shift() {
        let src = ramp(5, 3);
        let mut grid = SampleGrid::identity(5, 3);
        grid.positions.iter_mut().for_each(|p| p.0 += 1.0);
        let (out, valid) = bilinear_sample(&src, &grid);
        for y in 0..3 {
            for x in 0..5 {
                let i = y * 5 + x;
                if x == 4 {
                    assert!(!valid[i]);
                    assert_eq!(out.data()[i], 0.0);
                } else {
                    assert!(valid[i]);
                    assert_eq!(out.data()[i], src.data()[i + 1]);
                }
            }
        }
    }

    #[test]
    fn half_pixel_interpolates() {
        let src = Tensor::new(vec![1, 2], vec![0.0, 1.0]);
        let grid = SampleGrid { width: 1, height: 1, positions: vec![(0.5, 0.0)] };
        let (out, valid) = bilinear_sample(&src, &grid);
        assert_eq!(out.data(), &[0.5]);
        assert!(valid[0]);
    }

    #[test]
    fn inverse_warp_zero_and_stripes() {
        let (w, h) = (6, 3);
        let data = (0..h).flat_map(|_| (0..w).map(|x| if x % 2 == 0 { 1.0 } else { 0.0 })).collect();
        let img = Image::new(w, h, 1, data);
        let (same, _) = inverse_warp(&img, &FlowField::zeros(w, h));
        assert_eq!(same, img);
        let mut flow = FlowField::zeros(w, h);
        flow.u.iter_mut().for_each(|u| *u = 1.0);
        let (shifted, valid) = inverse_warp(&img, &flow);
        for y in 0..h {
            for x in 0..w - 1 {
                assert!(valid[y * w + x]);
                assert_eq!(shifted.get(x, y, 0), img.get(x + 1, y, 0));
            }
            assert!(!valid[y * w + w - 1]);
        }
    }

    #[test]
    fn validity_shrinks_with_domain() {
        // A sample valid in a smaller image is valid in a larger one.
        for &(x, y) in &[(0.0, 0.0), (2.5, 1.0), (3.0, 3.0), (-0.1, 1.0), (4.2, 0.0)] {
            if in_bounds(x, y, 4, 4) {
                assert!(in_bounds(x, y, 5, 5));
            }
        }
    }
}
