use super::{AutodiffError, Tensor, Var};

/// Ordered collection of named arrays. Iteration order is insertion order,
/// which fixes the flattening order used by optimizers and gradient checks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors {
    entries: Vec<(String, Tensor)>,
}

/// Free variables of a loss.
pub type ParamSet = NamedTensors;

/// Partial derivatives of a loss, congruent with the [`ParamSet`] they were taken at.
pub type Gradient = NamedTensors;

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new entry. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push((name, value));
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces the value of an existing entry; the shape may not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), AutodiffError> {
        let slot = self.get_mut(name).ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(AutodiffError::shape(
                "param_set",
                format!("`{name}` has shape {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero-filled set with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self { entries: self.entries.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect() }
    }

    /// Same names in the same order with the same shapes.
    pub fn is_congruent(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Scalar coordinate by flat index.
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for (_, t) in &mut self.entries {
            if index < t.len() {
                return &mut t.data_mut()[index];
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    /// Name and in-tensor offset of a flat index.
    pub fn locate(&self, mut index: usize) -> Option<(&str, usize)> {
        for (n, t) in &self.entries {
            if index < t.len() {
                return Some((n, index));
            }
            index -= t.len();
        }
        None
    }
}

/// Graph handles for the entries of a [`ParamSet`], looked up by name.
#[derive(Debug, Clone)]
pub struct Leaves {
    vars: Vec<(String, Var)>,
}

impl Leaves {
    pub(crate) fn new(vars: Vec<(String, Var)>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var, AutodiffError> {
        self.try_get(name).ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }
}
