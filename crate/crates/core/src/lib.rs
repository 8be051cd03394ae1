//! Differentiable structure-and-motion: depth, camera motion and masked
//! rigid object motions composed into dense flow, recovered from a frame
//! pair by direct gradient-based optimization.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod solver;
pub mod synth;
pub mod types;
pub mod warping;
