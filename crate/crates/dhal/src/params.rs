//! Named parameter storage with matching gradient slots.

use crate::error::{DhalError, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Owns all trainable parameters, keyed by a path-like name. Gradient slots
/// always exist and mirror parameter shapes; `backward` accumulates into them
/// until `zero_grad` is called.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(DhalError::Contract(format!("duplicate parameter name {name}")));
        }
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape.clone()));
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| DhalError::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| DhalError::Contract(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| DhalError::Contract(format!("no gradient slot for {name}")))
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &[f32]) -> Result<()> {
        let g = self
            .grads
            .get_mut(name)
            .ok_or_else(|| DhalError::Contract(format!("no gradient slot for {name}")))?;
        if g.data.len() != delta.len() {
            return Err(DhalError::shape(&g.shape, &[delta.len()], "gradient accumulation"));
        }
        for (gi, di) in g.data.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.values_mut() {
            g.data.fill(0.0);
        }
    }

    /// Names in lexicographic order (the serialization order).
    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }
}
