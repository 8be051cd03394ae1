//! Value-constraint primitives mapping free variables into their valid ranges.

use crate::autodiff::{arity, AutodiffError, Primitive, Tensor};

pub const DEPTH_ACTIVATION: &str = "depth_activation";
pub const MASK_ACTIVATION: &str = "mask_activation";

/// Largest representable depth.
pub const MAX_DEPTH: f64 = 100.0;

#[inline]
pub(crate) fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `min(1 + softplus(u), 100)` elementwise.
#[derive(Debug, Clone, Copy)]
pub struct DepthActivation;

impl Primitive for DepthActivation {
    fn name(&self) -> &'static str {
        DEPTH_ACTIVATION
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(DEPTH_ACTIVATION, inputs, 1)?;
        Ok(inputs[0].map(|u| (1.0 + softplus(u)).min(MAX_DEPTH)))
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&u, &d), &g)| if d >= MAX_DEPTH { 0.0 } else { g * sigmoid(u) })
            .collect();
        vec![Some(Tensor::new(out.shape().to_vec(), data))]
    }
}

/// `sigmoid(multiplier · logit)` elementwise.
#[derive(Debug, Clone, Copy)]
pub struct MaskActivation {
    pub multiplier: f64,
}

impl Primitive for MaskActivation {
    fn name(&self) -> &'static str {
        MASK_ACTIVATION
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        arity(MASK_ACTIVATION, inputs, 1)?;
        if !(self.multiplier.is_finite() && self.multiplier > 0.0) {
            return Err(AutodiffError::Domain {
                primitive: MASK_ACTIVATION.into(),
                detail: format!("multiplier {} must be positive", self.multiplier),
            });
        }
        let m = self.multiplier;
        Ok(inputs[0].map(|x| sigmoid(m * x)))
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let m = self.multiplier;
        let data = out.data().iter().zip(g.data()).map(|(&s, &g)| g * m * s * (1.0 - s)).collect();
        vec![Some(Tensor::new(out.shape().to_vec(), data))]
    }
}
