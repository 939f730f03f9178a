use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Frozen parameters are skipped by the optimizer and receive no gradient.
    pub frozen: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            frozen: false,
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Adds `grad` into the parameter's gradient buffer.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (dst, &src) in g.data_mut().iter_mut().zip(grad) {
                    *dst += src;
                }
            }
            None => {
                let mut g = Tensor::zeros(p.tensor.shape());
                g.data_mut().copy_from_slice(grad);
                p.grad = Some(g);
            }
        }
    }

    /// Converts every parameter to another element type; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: None,
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
