//! Named parameters with gradient slots.

use std::collections::HashMap;

use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};

/// A trainable tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of uniquely named parameters.
///
/// Iteration order is insertion order everywhere, which keeps optimizers,
/// checkpoints and Fisher estimation deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(CoreError::usage(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_string(), id.0);
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| CoreError::usage(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
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

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    /// Fill every gradient with zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Visit each parameter's value (mutably) and gradient together, in
    /// insertion order. This is the optimizer's update hook.
    pub fn for_each_value_grad(&mut self, mut f: impl FnMut(usize, &mut [f64], &[f64])) {
        for (i, p) in self.params.iter_mut().enumerate() {
            f(i, p.value.data_mut(), p.grad.data());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }
}
