use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Weight,
    /// State updated outside the optimizer (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    /// Frozen tensors are never modified, neither by the optimizer nor by
    /// running-statistic updates.
    pub trainable: bool,
}

/// Named parameter tensors of a model. Names are stable checkpoint keys.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            kind,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Adds `g` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let buf = self.params[id.0].value.grad_mut();
        assert_eq!(buf.len(), g.len(), "gradient length mismatch");
        for (a, &b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Marks every tensor whose name starts with one of `prefixes` as frozen.
    /// Returns the number of tensors affected.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                p.trainable = false;
                n += 1;
            }
        }
        n
    }

    /// Number of scalar weights (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the value of `name`, keeping the shape contract.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let cur = &mut self.params[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} vs {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        *cur = value;
        Ok(())
    }
}
