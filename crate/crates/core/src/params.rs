//! Named trainable parameters and non-trainable buffers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{EdmError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether decoupled weight decay applies (weights yes, norms and biases no).
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Owns every parameter and buffer of a model, addressed by unique
/// dotted names such as `backbone.stage1.block1.conv1.weight`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, Slot>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(EdmError::invalid("param_store", format!("duplicate name {name}")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, Slot::Param(self.params.len()))?;
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            decay,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    /// Kaiming-normal (fan-in, ReLU gain) weight.
    pub fn add_kaiming(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::rand_normal(shape, std, rng), true)
    }

    /// Uniform `±1/sqrt(fan_in)` weight, the usual default for linear layers.
    pub fn add_fan_in_uniform(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::rand_uniform(shape, -bound, bound, rng), true)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<T>> {
        match self.names.get(name)? {
            Slot::Param(i) => Some(&self.params[*i].value),
            Slot::Buffer(i) => Some(&self.buffers[*i].value),
        }
    }

    /// Overwrites the tensor stored under `name`, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = *self
            .names
            .get(name)
            .ok_or_else(|| EdmError::Checkpoint(format!("unknown tensor {name}")))?;
        let target = match slot {
            Slot::Param(i) => &mut self.params[i].value,
            Slot::Buffer(i) => &mut self.buffers[i].value,
        };
        if target.shape() != value.shape() {
            return Err(EdmError::Checkpoint(format!(
                "tensor {name} has shape {:?}, checkpoint holds {:?}",
                target.shape(),
                value.shape()
            )));
        }
        *target = value;
        Ok(())
    }

    /// Every named tensor (parameters first, then buffers) in registration order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_parameters_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// First parameter whose gradient holds a NaN or infinity, if any.
    pub fn first_non_finite_grad(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| !p.grad.all_finite())
            .map(|p| p.name.as_str())
    }
}
