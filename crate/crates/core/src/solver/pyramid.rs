//! Box downsampling and nearest-neighbor upsampling of grids.

use crate::autodiff::Tensor;
use crate::losses::DepthSupervision;
use crate::types::{DepthMap, FlowField, Image};

/// Source index range covered by target cell `i` when mapping `src` cells onto `dst`.
fn span(i: usize, src: usize, dst: usize) -> std::ops::Range<usize> {
    let start = i * src / dst;
    let end = ((i + 1) * src / dst).max(start + 1).min(src);
    start..end
}

/// Box average of an `[h, w]` or `[h, w, c]` grid onto `width×height`.
pub fn downsample_grid(t: &Tensor, width: usize, height: usize) -> Tensor {
    let (h, w, c) = t.grid_dims().expect("grid tensor");
    let src = t.data();
    let mut out = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let ys = span(y, h, height);
        for x in 0..width {
            let xs = span(x, w, width);
            let n = (ys.len() * xs.len()) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for sy in ys.clone() {
                    for sx in xs.clone() {
                        acc += src[(sy * w + sx) * c + ch];
                    }
                }
                out.push(acc / n);
            }
        }
    }
    let mut shape = vec![height, width];
    if t.shape().len() == 3 {
        shape.push(c);
    }
    Tensor::new(shape, out)
}

/// Nearest-neighbor resampling of a grid onto `width×height`.
pub fn upsample_grid(t: &Tensor, width: usize, height: usize) -> Tensor {
    let (h, w, c) = t.grid_dims().expect("grid tensor");
    let src = t.data();
    let mut out = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let sy = (y * h / height).min(h - 1);
        for x in 0..width {
            let sx = (x * w / width).min(w - 1);
            out.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    let mut shape = vec![height, width];
    if t.shape().len() == 3 {
        shape.push(c);
    }
    Tensor::new(shape, out)
}

pub fn downsample_image(img: &Image, width: usize, height: usize) -> Image {
    Image::from_tensor(&downsample_grid(&img.to_tensor(), width, height))
}

/// Averages `(U, V, W)` and rescales `U`, `V` to the coarser pixel grid.
pub fn downsample_flow(flow: &FlowField, width: usize, height: usize) -> FlowField {
    let sx = width as f64 / flow.width as f64;
    let sy = height as f64 / flow.height as f64;
    let grid =
        |v: &[f64]| downsample_grid(&Tensor::new(vec![flow.height, flow.width], v.to_vec()), width, height).into_data();
    FlowField {
        width,
        height,
        u: grid(&flow.u).into_iter().map(|u| u * sx).collect(),
        v: grid(&flow.v).into_iter().map(|v| v * sy).collect(),
        w: grid(&flow.w),
    }
}

/// Averages the observed depths in each cell; cells without any observation are masked out.
pub fn downsample_depth_supervision(sup: &DepthSupervision, width: usize, height: usize) -> DepthSupervision {
    let (w, h) = (sup.depth.width, sup.depth.height);
    let mut depth = Vec::with_capacity(width * height);
    let mut mask = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (mut acc, mut n) = (0.0, 0usize);
            for sy in span(y, h, height) {
                for sx in span(x, w, width) {
                    let i = sy * w + sx;
                    if sup.mask[i] {
                        acc += sup.depth.data[i];
                        n += 1;
                    }
                }
            }
            mask.push(n > 0);
            depth.push(if n > 0 { acc / n as f64 } else { 0.0 });
        }
    }
    DepthSupervision { depth: DepthMap::new(width, height, depth), mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_average_and_nearest() {
        let t = Tensor::new(vec![2, 4], vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]);
        let d = downsample_grid(&t, 2, 1);
        assert_eq!(d.data(), &[2.0, 6.0]);
        let u = upsample_grid(&d, 4, 2);
        assert_eq!(u.data(), &[2.0, 2.0, 6.0, 6.0, 2.0, 2.0, 6.0, 6.0]);
    }

    #[test]
    fn flow_rescales_to_coarse_pixels() {
        let mut f = FlowField::zeros(4, 4);
        f.u.iter_mut().for_each(|u| *u = 2.0);
        let d = downsample_flow(&f, 2, 2);
        assert!(d.u.iter().all(|&u| u == 1.0));
    }
}
