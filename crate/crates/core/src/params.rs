//! Named parameter storage and tape binding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float as _;

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrices and biases: trained, weight-decayed.
    Weight,
    /// Norm gains/biases and the temperature: trained, never decayed.
    NoDecay,
    /// Trainable only when explicitly enabled (toy encoder tables).
    Frozen,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    /// Weight drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> ParamId {
        let bound = 1.0 / (fan_in as Float).sqrt();
        let t = Tensor::from_fn(shape, |_| rng::uniform(rng, -bound, bound));
        self.add(name, t, ParamKind::Weight)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces the value of `name`, rejecting shape drift.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::State(format!("unexpected tensor `{name}`")))?;
        let slot = &mut self.params[idx].value;
        if slot.shape() != value.shape() {
            return Err(Error::State(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Places every parameter on the tape. `train_frozen` decides whether
    /// [`ParamKind::Frozen`] entries receive gradients.
    pub fn bind(&self, tape: &mut Tape, train_frozen: bool) -> Result<Bindings> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let trainable = p.kind != ParamKind::Frozen || train_frozen;
                tape.leaf(p.value.clone(), trainable)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bindings { vars })
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bindings {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().map(|(i, v)| (ParamId(i), *v))
    }
}
