//! Generic elementwise and reduction primitives.

use super::{AutodiffError, Primitive, Tensor};

pub const ADD: &str = "add";
pub const SUB: &str = "sub";
pub const TANH: &str = "tanh";
pub const CHANNEL: &str = "channel";
pub const WEIGHTED_SUM: &str = "weighted_sum";
pub const SUM_SQUARES: &str = "sum_squares";
pub const MASKED_L1: &str = "masked_l1";
pub const ELEMENT: &str = "element";

/// Subgradient of `|x|` with the value 0 at exactly 0.
pub fn l1_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::shape(name, format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn arity(name: &str, inputs: &[&Tensor], n: usize) -> Result<(), AutodiffError> {
    if inputs.len() != n {
        return Err(AutodiffError::shape(name, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct Add;

impl Primitive for Add {
    fn name(&self) -> &'static str {
        ADD
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(ADD, inputs, 2)?;
        same_shape(ADD, inputs[0], inputs[1])?;
        let mut out = inputs[0].clone();
        out.accumulate(inputs[1]);
        Ok(out)
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        needs.iter().map(|&n| n.then(|| g.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sub;

impl Primitive for Sub {
    fn name(&self) -> &'static str {
        SUB
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(SUB, inputs, 2)?;
        same_shape(SUB, inputs[0], inputs[1])?;
        let data = inputs[0].data().iter().zip(inputs[1].data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::new(inputs[0].shape().to_vec(), data))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tanh;

impl Primitive for Tanh {
    fn name(&self) -> &'static str {
        TANH
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(TANH, inputs, 1)?;
        Ok(inputs[0].map(f64::tanh))
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = out.data().iter().zip(g.data()).map(|(y, g)| g * (1.0 - y * y)).collect();
        vec![Some(Tensor::new(out.shape().to_vec(), data))]
    }
}

/// Extracts one channel of an `[h, w, c]` grid as an `[h, w]` grid.
#[derive(Debug, Clone, Copy)]
pub struct Channel(pub usize);

impl Primitive for Channel {
    fn name(&self) -> &'static str {
        CHANNEL
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(CHANNEL, inputs, 1)?;
        let &[h, w, c] = inputs[0].shape() else {
            return Err(AutodiffError::shape(CHANNEL, "expected an [h, w, c] grid"));
        };
        if self.0 >= c {
            return Err(AutodiffError::shape(CHANNEL, format!("channel {} out of range for {c} channels", self.0)));
        }
        let data = inputs[0].data().iter().skip(self.0).step_by(c).copied().collect();
        Ok(Tensor::new(vec![h, w], data))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let c = inputs[0].shape()[2];
        let mut out = Tensor::zeros(inputs[0].shape());
        for (i, v) in g.data().iter().enumerate() {
            out.data_mut()[i * c + self.0] = *v;
        }
        vec![Some(out)]
    }
}

/// `Σ wᵢ·xᵢ` over single-element inputs.
#[derive(Debug, Clone)]
pub struct WeightedSum(pub Vec<f64>);

impl Primitive for WeightedSum {
    fn name(&self) -> &'static str {
        WEIGHTED_SUM
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(WEIGHTED_SUM, inputs, self.0.len())?;
        let mut total = 0.0;
        for (x, w) in inputs.iter().zip(&self.0) {
            if x.len() != 1 {
                return Err(AutodiffError::shape(WEIGHTED_SUM, "inputs must be scalars"));
            }
            total += w * x.item();
        }
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        inputs.iter().zip(&self.0).map(|(x, w)| Some(Tensor::filled(x.shape(), w * g.item()))).collect()
    }
}

/// Single element of a tensor, by flat index, as a scalar.
#[derive(Debug, Clone, Copy)]
pub struct Element(pub usize);

impl Primitive for Element {
    fn name(&self) -> &'static str {
        ELEMENT
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(ELEMENT, inputs, 1)?;
        match inputs[0].data().get(self.0) {
            Some(&v) => Ok(Tensor::scalar(v)),
            None => Err(AutodiffError::shape(
                ELEMENT,
                format!("index {} out of range for shape {:?}", self.0, inputs[0].shape()),
            )),
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut out = Tensor::zeros(inputs[0].shape());
        out.data_mut()[self.0] = g.item();
        vec![Some(out)]
    }
}

/// `Σ x²` over all elements.
#[derive(Debug, Clone, Copy)]
pub struct SumSquares;

impl Primitive for SumSquares {
    fn name(&self) -> &'static str {
        SUM_SQUARES
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(SUM_SQUARES, inputs, 1)?;
        Ok(Tensor::scalar(inputs[0].data().iter().map(|v| v * v).sum()))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let g = g.item();
        vec![Some(inputs[0].map(|v| 2.0 * v * g))]
    }
}

/// How the per-pixel channel values are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelReduce {
    Mean,
    Sum,
}

/// Denominator of a masked average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Number of pixels where the mask is set.
    Valid,
    /// Total pixel count `h·w`, regardless of the mask.
    AllPixels,
}

/// Masked L1 average of an `[h, w]` or `[h, w, c]` grid:
/// `(1/n)·Σ_{valid px} reduce_c |x|`. Zero valid pixels give 0.
#[derive(Debug, Clone)]
pub struct MaskedL1 {
    pub mask: Option<Vec<bool>>,
    pub channels: ChannelReduce,
    pub normalization: Normalization,
}

impl MaskedL1 {
    pub fn valid_mean(mask: Vec<bool>) -> Self {
        Self { mask: Some(mask), channels: ChannelReduce::Mean, normalization: Normalization::Valid }
    }

    /// Per-pixel channel scale and denominator.
    fn factors(&self, x: &Tensor) -> Result<(usize, f64), AutodiffError> {
        let (h, w, c) = x.grid_dims().ok_or_else(|| AutodiffError::shape(MASKED_L1, "expected a grid"))?;
        if let Some(mask) = &self.mask {
            if mask.len() != h * w {
                return Err(AutodiffError::shape(
                    MASKED_L1,
                    format!("mask has {} entries for {h}x{w} grid", mask.len()),
                ));
            }
        }
        let count = match (&self.normalization, &self.mask) {
            (Normalization::AllPixels, _) | (Normalization::Valid, None) => h * w,
            (Normalization::Valid, Some(m)) => m.iter().filter(|&&v| v).count(),
        };
        let channel_scale = match self.channels {
            ChannelReduce::Mean => 1.0 / c as f64,
            ChannelReduce::Sum => 1.0,
        };
        if count == 0 {
            return Ok((c, 0.0));
        }
        Ok((c, channel_scale / count as f64))
    }

    fn is_valid(&self, pixel: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[pixel])
    }
}

impl Primitive for MaskedL1 {
    fn name(&self) -> &'static str {
        MASKED_L1
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(MASKED_L1, inputs, 1)?;
        let x = inputs[0];
        let (c, scale) = self.factors(x)?;
        let mut total = 0.0;
        for (p, px) in x.data().chunks(c).enumerate() {
            if self.is_valid(p) {
                total += px.iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        Ok(Tensor::scalar(total * scale))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (c, scale) = self.factors(x).expect("validated in forward");
        let s = scale * g.item();
        let mut out = Tensor::zeros(x.shape());
        for (p, (gx, px)) in out.data_mut().chunks_mut(c).zip(x.data().chunks(c)).enumerate() {
            if self.is_valid(p) {
                for (gv, v) in gx.iter_mut().zip(px) {
                    *gv = s * l1_sign(*v);
                }
            }
        }
        vec![Some(out)]
    }
}
