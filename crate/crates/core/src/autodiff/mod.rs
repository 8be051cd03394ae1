//! Reverse-mode differentiation over a fixed set of array primitives.
//!
//! A loss is written as a closure that appends nodes to a [`Graph`]; each
//! node is a registered [`Primitive`] with a hand-derived adjoint. Graphs are
//! built per evaluation and evaluation is single-threaded, so repeated calls
//! with identical inputs are bit-identical.

mod basic;
mod graph;
mod params;
mod tensor;

pub(crate) use basic::arity;
pub use basic::{
    l1_sign, Add, Channel, ChannelReduce, Element, MaskedL1, Normalization, Sub, SumSquares, Tanh, WeightedSum,
};
pub use basic::{ADD, CHANNEL, ELEMENT, MASKED_L1, SUB, SUM_SQUARES, TANH, WEIGHTED_SUM};
pub use graph::{AutodiffError, Graph, Primitive, PrimitiveRegistry, Var};
pub use params::{Gradient, Leaves, NamedTensors, ParamSet};
pub use tensor::Tensor;

use crate::{geometry, losses, solver, warping};

/// Names of all primitives the estimation pipeline uses.
pub const STANDARD_PRIMITIVES: &[&str] = &[
    basic::ADD,
    basic::SUB,
    basic::TANH,
    basic::CHANNEL,
    basic::WEIGHTED_SUM,
    basic::SUM_SQUARES,
    basic::MASKED_L1,
    basic::ELEMENT,
    geometry::ops::ROTATION_FROM_SINES,
    geometry::ops::BACKPROJECT,
    geometry::ops::OBJECT_MOTION,
    geometry::ops::RIGID_TRANSFORM,
    geometry::ops::PROJECT_FLOW,
    warping::BILINEAR_SAMPLE,
    losses::ops::FIRST_ORDER_SMOOTHNESS,
    losses::ops::SECOND_ORDER_SMOOTHNESS,
    losses::ops::POSE_ERROR,
    solver::ops::DEPTH_ACTIVATION,
    solver::ops::MASK_ACTIVATION,
];

/// A differentiable scalar function of a [`ParamSet`], expressed as graph construction.
pub trait LossFn {
    fn build(&self, graph: &mut Graph<'_>, leaves: &Leaves) -> Result<Var, AutodiffError>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Graph<'_>, &Leaves) -> Result<Var, AutodiffError>,
{
    fn build(&self, graph: &mut Graph<'_>, leaves: &Leaves) -> Result<Var, AutodiffError> {
        self(graph, leaves)
    }
}

fn build_graph<'r, R>(
    registry: &'r PrimitiveRegistry,
    params: &ParamSet,
    build: impl FnOnce(&mut Graph<'r>, &Leaves) -> Result<(Var, R), AutodiffError>,
) -> Result<(Graph<'r>, Leaves, Var, R), AutodiffError> {
    let mut graph = Graph::new(registry);
    let vars = params.iter().map(|(name, t)| (name.to_string(), graph.param(t.clone()))).collect();
    let leaves = Leaves::new(vars);
    let (root, extra) = build(&mut graph, &leaves)?;
    if graph.value(root).len() != 1 {
        return Err(AutodiffError::NonScalarLoss(graph.value(root).shape().to_vec()));
    }
    Ok((graph, leaves, root, extra))
}

/// Loss value without the reverse sweep.
pub fn evaluate<L: LossFn + ?Sized>(
    registry: &PrimitiveRegistry,
    loss_fn: &L,
    params: &ParamSet,
) -> Result<f64, AutodiffError> {
    let (graph, _, root, ()) = build_graph(registry, params, |g, l| Ok((loss_fn.build(g, l)?, ())))?;
    Ok(graph.value(root).item())
}

/// Loss value and its exact reverse-mode gradient with respect to every entry of `params`.
pub fn value_and_grad<L: LossFn + ?Sized>(
    registry: &PrimitiveRegistry,
    loss_fn: &L,
    params: &ParamSet,
) -> Result<(f64, Gradient), AutodiffError> {
    let (value, grad, ()) = value_and_grad_with(registry, params, |g, l| Ok((loss_fn.build(g, l)?, ())))?;
    Ok((value, grad))
}

/// [`value_and_grad`] for a builder that also extracts side results (such as
/// intermediate values) from the forward graph.
pub fn value_and_grad_with<R>(
    registry: &PrimitiveRegistry,
    params: &ParamSet,
    build: impl FnOnce(&mut Graph<'_>, &Leaves) -> Result<(Var, R), AutodiffError>,
) -> Result<(f64, Gradient, R), AutodiffError> {
    let (graph, leaves, root, extra) = build_graph(registry, params, build)?;
    let value = graph.value(root).item();
    let mut adjoints = graph.backward(root)?;
    let mut grad = params.zeros_like();
    for ((_, slot), var) in grad.iter_mut().zip(leaves.all()) {
        debug_assert!(graph.is_param(var));
        if let Some(g) = adjoints[var.index()].take() {
            *slot = g;
        }
    }
    Ok((value, grad, extra))
}

/// Central differences `(f(x+eps) − f(x−eps)) / (2·eps)` for every scalar coordinate.
pub fn finite_diff_grad<L: LossFn + ?Sized>(
    registry: &PrimitiveRegistry,
    loss_fn: &L,
    params: &ParamSet,
    eps: f64,
) -> Result<Gradient, AutodiffError> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut grad = params.zeros_like();
    let mut probe = params.clone();
    for i in 0..params.num_scalars() {
        let (fp, fm) = central_pair(registry, loss_fn, &mut probe, i, eps)?;
        *grad.scalar_mut(i) = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Loss at `x + eps·eᵢ` and `x − eps·eᵢ`; leaves `probe` unchanged on return.
pub fn central_pair<L: LossFn + ?Sized>(
    registry: &PrimitiveRegistry,
    loss_fn: &L,
    probe: &mut ParamSet,
    index: usize,
    eps: f64,
) -> Result<(f64, f64), AutodiffError> {
    let x0 = *probe.scalar_mut(index);
    *probe.scalar_mut(index) = x0 + eps;
    let fp = evaluate(registry, loss_fn, probe);
    *probe.scalar_mut(index) = x0 - eps;
    let fm = evaluate(registry, loss_fn, probe);
    *probe.scalar_mut(index) = x0;
    Ok((fp?, fm?))
}
