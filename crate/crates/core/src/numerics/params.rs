use std::collections::BTreeMap;

use super::{Gradients, NumericsError, Tensor};

/// Named parameter tensors with matching gradient accumulators.
///
/// Iteration order is lexicographic by name, which fixes the order of
/// parameter initialisation, checkpoint layout and optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NumericsError> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let (r, c) = value.shape();
        self.grads.insert(name.clone(), Tensor::zeros(r, c));
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameter values paired with their accumulated gradients.
    pub fn iter_with_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.values
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, v), g)| (k.as_str(), v, g))
    }

    pub fn grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.grads.iter_mut().map(|(k, g)| (k.as_str(), g))
    }

    pub fn num_values(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    /// Adds `scale · grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (name, g) in grads.params() {
            if let Some(acc) = self.grads.get_mut(name) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * v;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }
}
