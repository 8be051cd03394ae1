use std::collections::BTreeSet;
use std::fmt;

use super::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("primitive `{0}` is not registered with the engine")]
    UnregisteredPrimitive(String),
    #[error("primitive `{primitive}` produced a non-finite {stage}")]
    NonFinite { primitive: String, stage: &'static str },
    #[error("primitive `{primitive}`: {detail}")]
    Shape { primitive: String, detail: String },
    #[error("primitive `{primitive}`: input outside its domain: {detail}")]
    Domain { primitive: String, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl AutodiffError {
    pub fn shape(primitive: &str, detail: impl Into<String>) -> Self {
        AutodiffError::Shape { primitive: primitive.to_string(), detail: detail.into() }
    }
}

/// An array-level operation with a hand-derived adjoint.
///
/// Primitives may carry constant data (intrinsics, validity masks, ground
/// truth); only tensors passed as graph inputs receive gradients.
pub trait Primitive: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError>;

    /// Vector-Jacobian product. Returns one entry per input; entries for
    /// which `needs[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

/// Set of primitive names a [`Graph`] accepts.
#[derive(Debug, Clone, Default)]
pub struct PrimitiveRegistry {
    names: BTreeSet<&'static str>,
}

impl PrimitiveRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Every primitive the estimation pipeline is built from.
    pub fn standard() -> Self {
        let mut reg = Self::empty();
        for name in super::STANDARD_PRIMITIVES {
            reg.register(name);
        }
        reg
    }

    pub fn register(&mut self, name: &'static str) {
        self.names.insert(name);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.names.iter().copied()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

enum NodeKind {
    Constant,
    Param,
    Op { primitive: Box<dyn Primitive>, inputs: Vec<Var> },
}

struct Node {
    value: Tensor,
    kind: NodeKind,
    requires_grad: bool,
}

/// Define-by-run tape. Values are computed eagerly as nodes are appended.
pub struct Graph<'r> {
    registry: &'r PrimitiveRegistry,
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl<'r> Graph<'r> {
    pub fn new(registry: &'r PrimitiveRegistry) -> Self {
        Self { registry, nodes: Vec::new() }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, NodeKind::Constant, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, NodeKind::Param, true)
    }

    fn push(&mut self, value: Tensor, kind: NodeKind, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, kind, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn apply<P: Primitive + 'static>(&mut self, primitive: P, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let name = primitive.name();
        if !self.registry.contains(name) {
            return Err(AutodiffError::UnregisteredPrimitive(name.to_string()));
        }
        let value = {
            let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            primitive.forward(&refs)?
        };
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { primitive: name.to_string(), stage: "value" });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, NodeKind::Op { primitive: Box::new(primitive), inputs: inputs.to_vec() }, requires_grad))
    }

    /// Reverse sweep from a scalar root. Returns the adjoint of every node
    /// that the root depends on through differentiable paths.
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Tensor>>, AutodiffError> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root_value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let NodeKind::Op { primitive, inputs } = &node.kind else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(grad_out) = adjoints[idx].take() else {
                continue;
            };
            let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let grads = primitive.backward(&refs, &node.value, &grad_out, &needs);
            debug_assert_eq!(grads.len(), inputs.len());
            for ((input, grad), need) in inputs.iter().zip(grads).zip(&needs) {
                let (true, Some(grad)) = (*need, grad) else {
                    continue;
                };
                if !grad.is_finite() {
                    return Err(AutodiffError::NonFinite {
                        primitive: primitive.name().to_string(),
                        stage: "gradient",
                    });
                }
                match &mut adjoints[input.0] {
                    Some(acc) => acc.accumulate(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            // Param adjoints are kept; intermediate adjoints are consumed above.
        }
        Ok(adjoints)
    }

    pub(crate) fn is_param(&self, var: Var) -> bool {
        matches!(self.nodes[var.0].kind, NodeKind::Param)
    }
}
