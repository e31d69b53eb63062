use indexmap::IndexMap;

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, name-indexed set of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    /// Replaces an existing tensor, refusing shape changes.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.entries.get_mut(name) {
            None => invalid("ParamStore::set", format!("unknown parameter `{name}`")),
            Some(slot) if slot.shape() != value.shape() => shape_err("ParamStore::set", slot.shape(), value.shape()),
            Some(slot) => {
                *slot = value;
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Keeps only entries whose name satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` into this store.
    pub fn extend_from(&mut self, other: &ParamStore<T>) {
        for (k, v) in other.iter() {
            self.insert(k, v.clone());
        }
    }

    /// Records every parameter on `graph` as a differentiable leaf.
    pub fn attach<'g>(&self, graph: &'g Graph<T>) -> ParamVars<'g, T> {
        self.attach_with(graph, true)
    }

    /// Records every parameter on `graph` as a constant.
    pub fn attach_frozen<'g>(&self, graph: &'g Graph<T>) -> ParamVars<'g, T> {
        self.attach_with(graph, false)
    }

    fn attach_with<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> ParamVars<'g, T> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }
}

/// Parameters of a [`ParamStore`] recorded on one graph.
pub struct ParamVars<'g, T: Scalar> {
    vars: IndexMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> ParamVars<'g, T> {
    /// Builds a table from already recorded variables, e.g. gradient-check leaves.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<'g, T>)>) -> Self {
        ParamVars { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| crate::TensorError::InvalidArgument {
                op: "ParamVars::get",
                reason: format!("missing parameter `{name}`"),
            })
    }

    /// Gradients in store order, zero-filled for unused parameters.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.values().map(|&v| grads.get_or_zeros(v)).collect()
    }
}
