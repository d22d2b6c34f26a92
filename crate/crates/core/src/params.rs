//! Named model parameters with trainable/frozen flags.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for; drives (re-)initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamRole {
    /// Dense or convolution weight with the given fan-in.
    Weight { fan_in: usize },
    Bias,
    /// Multiplicative normalization gain (initialized to one).
    Gain,
    /// Additive normalization shift (initialized to zero).
    Shift,
    /// Token or position embedding.
    Embedding,
    RunningMean,
    RunningVar,
    LoraA,
    LoraB,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub role: ParamRole,
    value: Tensor,
    trainable: bool,
    pretrained: bool,
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Stands in for a weight that would come from large-scale pretraining.
    pub fn pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        role: ParamRole,
        trainable: bool,
    ) -> Result<ParamId> {
        self.insert(name.into(), value, role, trainable, false)
    }

    /// Registers a parameter whose value is set by
    /// [`load_pseudo_pretrained`](Self::load_pseudo_pretrained).
    pub fn register_pretrained(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        role: ParamRole,
        trainable: bool,
    ) -> Result<ParamId> {
        self.insert(name.into(), value, role, trainable, true)
    }

    fn insert(&mut self, name: String, value: Tensor, role: ParamRole, trainable: bool, pretrained: bool) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            role,
            value,
            trainable,
            pretrained,
            grad: None,
        });
        Ok(id)
    }

    /// Deterministically redraws every pretrained parameter from `seed`,
    /// in registration order.
    pub fn load_pseudo_pretrained(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut().filter(|p| p.pretrained) {
            p.value = crate::nn::pretrained_init(p.role, p.value.shape(), &mut rng);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set parameter", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Freezing drops any gradient buffer the parameter held.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.value.len()).sum()
    }

    /// Adds the tape's parameter gradients into the registry's buffers.
    /// Only trainable parameters ever receive a buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            match p.grad.as_mut() {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Option<Tensor>) {
        self.params[id.0].grad = grad;
    }

    /// Copies of every value, indexed like the registry.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Names of parameters whose value differs bitwise from `before`.
    pub fn changed_since(&self, before: &[Tensor]) -> Vec<String> {
        self.params
            .iter()
            .zip(before)
            .filter(|(p, old)| {
                p.value
                    .data()
                    .iter()
                    .zip(old.data())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            })
            .map(|(p, _)| p.name.clone())
            .collect()
    }
}
