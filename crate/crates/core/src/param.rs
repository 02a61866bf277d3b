//! Learnable parameters with gradient accumulators, and the SGD update.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named learnable tensor paired with a same-shape gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every learnable parameter of one training context.
///
/// Names are unique; lookups by name are stable across clones, which is what
/// the aggregation protocol relies on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Parameters in name order (the canonical bundle order).
    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.by_name
            .iter()
            .map(|(name, &i)| (name.as_str(), &self.params[i]))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) {
        self.params[id.0].grad.add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One SGD step over every parameter in the store: value ← value − lr·grad,
/// then zero the gradients.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for p in store.params.iter_mut() {
        for (v, g) in p.value.values_mut().iter_mut().zip(p.grad.values().iter()) {
            *v -= lr * g;
        }
        p.grad.fill(0.0);
    }
    Ok(())
}
