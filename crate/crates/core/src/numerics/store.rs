use std::collections::{BTreeMap, BTreeSet};

use super::{Graph, NumericsError, Tensor, Var};

/// Named parameter tensors plus the set of paths the optimizer may touch.
///
/// Paths not in `tunable` are bound into graphs with `requires_grad = false`,
/// so no gradient buffer is ever created for them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    tunable: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor, tunable: bool) {
        let path = path.into();
        if tunable {
            self.tunable.insert(path.clone());
        } else {
            self.tunable.remove(&path);
        }
        self.values.insert(path, value);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.values.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.values.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.values.contains_key(path)
    }

    pub fn is_tunable(&self, path: &str) -> bool {
        self.tunable.contains(path)
    }

    pub fn tunable(&self) -> &BTreeSet<String> {
        &self.tunable
    }

    pub fn frozen(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values
            .iter()
            .filter(|(k, _)| !self.tunable.contains(*k))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    pub fn tunable_scalar_count(&self) -> usize {
        self.tunable.iter().map(|k| self.values[k].len()).sum()
    }

    /// Copy with every tensor frozen, for gradient-free evaluation.
    pub fn detached(&self) -> Self {
        Self {
            values: self.values.clone(),
            tunable: BTreeSet::new(),
        }
    }

    /// Binds `path` into `g` as a leaf, reusing the existing leaf when the
    /// same path was bound before so shared parameters accumulate one gradient.
    pub fn bind(&self, g: &mut Graph, path: &str) -> Result<Var, NumericsError> {
        let value = self
            .values
            .get(path)
            .ok_or_else(|| NumericsError::UnknownParam(path.to_string()))?;
        Ok(g.param(path, value, self.tunable.contains(path)))
    }
}
