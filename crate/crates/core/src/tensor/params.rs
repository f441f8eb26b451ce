use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Named parameters in insertion order.
///
/// Iteration order is the order in which parameters were registered, so two
/// stores built by the same construction sequence line up element for
/// element (optimizer state, EMA copies and checkpoints rely on this).
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    /// Swaps in new values for an existing parameter, keeping its
    /// `requires_grad` flag. The old tensor (and its gradient) is dropped.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if data.len() != slot.numel() {
            return Err(Error::shape(
                "set_data",
                format!(
                    "`{name}` has {} values, got {}",
                    slot.numel(),
                    data.len()
                ),
            ));
        }
        *slot = Tensor::leaf(data, slot.shape().to_vec(), slot.requires_grad());
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Deep copy whose leaves carry the given `requires_grad` flag.
    pub fn copy_with_grad(&self, requires_grad: bool) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    Tensor::leaf(v.to_vec(), v.shape().to_vec(), requires_grad),
                )
            })
            .collect();
        ParameterStore { entries }
    }

    /// Drops accumulated gradients on every parameter.
    pub fn zero_grad(&self) {
        self.entries.values().for_each(Tensor::zero_grad);
    }

    /// True when both stores hold the same names with the same shapes, in
    /// the same order.
    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }
}
