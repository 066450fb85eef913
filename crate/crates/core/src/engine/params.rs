use std::collections::HashMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor. Names are path-like (`stages.1.blocks.0.dwconv.weight`).
#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered collection of named parameters with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the stored gradient of `id`, allocating it on first use.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "gradient {:?} for `{}` of shape {:?}",
                    grad.shape(),
                    p.name,
                    p.value.shape()
                ),
            ));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
