//! Named trainable parameters with gradient accumulators.

use super::error::{KernelError, Result};
use super::real::Real;
use super::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Owns every parameter of a model; the graph references them by id.
#[derive(Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(KernelError::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) -> Result<()> {
        self.params[id.0].grad.add_assign(delta)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrites parameter values from `(name, tensor)` pairs; every
    /// parameter in the store must be covered with a matching shape.
    pub fn load_values(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        for p in &mut self.params {
            let found = values
                .iter()
                .find(|(n, _)| n == &p.name)
                .ok_or_else(|| KernelError::State(format!("missing parameter {:?}", p.name)))?;
            if found.1.shape() != p.value.shape() {
                return Err(KernelError::Shape {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: found.1.shape().to_vec(),
                });
            }
            p.value = found.1.clone();
        }
        Ok(())
    }
}
