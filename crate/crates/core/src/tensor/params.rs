use std::collections::HashMap;

use rand::Rng;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named tensor owned by a model. Buffers (batch-norm running statistics)
/// are stored here too but are not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, mut tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::arg("param", format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(trainable);
        if trainable {
            let n = tensor.numel();
            tensor.set_grad(vec![0.0; n])?;
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
        });
        Ok(ParamId(id))
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        self.insert(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        self.insert(name, tensor, false)
    }

    /// Uniform init in `±sqrt(6 / fan_in)`-style bounds (He uniform).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Bias init in `±1 / sqrt(fan_in)`.
    pub fn add_bias<R: Rng>(&mut self, name: &str, len: usize, fan_in: usize, rng: &mut R) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(vec![len], data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Writes the gradients of every trainable parameter from a finished
    /// backward pass. Parameters not reached by the loss get zeros.
    pub fn collect_grads(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        self.zero_grad();
        for (var, id) in tape.param_vars() {
            if !self.params[id.0].trainable() {
                continue;
            }
            if let Some(g) = grads.get(var) {
                let t = &mut self.params[id.0].tensor;
                let mut acc = t.grad().map(<[f64]>::to_vec).unwrap_or_default();
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                t.set_grad(acc)?;
            }
        }
        Ok(())
    }

    /// Replaces all values by those of `other`, matching by name. Shapes and
    /// the name set must agree exactly.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                other.len(),
                self.params.len()
            )));
        }
        for (name, t) in other {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let p = &mut self.params[id.0].tensor;
            if p.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.detached()))
            .collect()
    }

    /// Puts every parameter on `tape` and returns the handles.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: (0..self.params.len())
                .map(|i| tape.param(self, ParamId(i)))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }
}

/// Tape handles for all parameters of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn opt(&self, id: Option<ParamId>) -> Option<Var> {
        id.map(|id| self.vars[id.0])
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}
