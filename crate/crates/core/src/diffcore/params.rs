use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Named parameter tensors. Iteration order is the lexical name order, which
/// fixes every reduction that walks the store.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

/// Gradients keyed by parameter name.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Overwrites values in place; the shape must not change.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "assign",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }
}

/// Sums gradient maps in slice order, then scales by `scale`.
pub fn reduce_grads<T: Real>(parts: &[ParamGrads<T>], scale: T) -> ParamGrads<T> {
    let mut out: ParamGrads<T> = BTreeMap::new();
    for part in parts {
        for (name, g) in part {
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
    }
    for g in out.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    out
}
