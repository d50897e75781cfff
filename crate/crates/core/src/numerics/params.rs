//! Named parameter collection shared by the model, optimizer and checkpoints.

use std::collections::BTreeMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered map from parameter name to tensor.
///
/// Iteration order is the sorted name order, which fixes the layout of
/// checkpoints and makes optimizer sweeps deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: BTreeMap::new() }
    }

    /// Inserts a parameter; duplicate names are a contract error.
    pub fn insert(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
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

    /// Total element count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.entries.iter_mut()
    }

    /// Converts every tensor through f64 into another precision.
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast::<T>())).collect(),
        }
    }
}
