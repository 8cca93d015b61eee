use std::collections::BTreeMap;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::dim(
                "param_set",
                format!(
                    "{}: stored {:?}, given {:?}",
                    self.names[id.0],
                    slot.shape(),
                    value.shape()
                ),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Gradient buffers keyed by parameter, zero-initialised lazily.
#[derive(Clone, Debug)]
pub struct Grads<S> {
    bufs: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn new(n_params: usize) -> Self {
        Self {
            bufs: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[S]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[S]) {
        if id.0 >= self.bufs.len() {
            self.bufs.resize(id.0 + 1, None);
        }
        match &mut self.bufs[id.0] {
            Some(buf) => {
                for (a, &b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &Grads<S>) {
        for (i, b) in other.bufs.iter().enumerate() {
            if let Some(b) = b {
                self.accumulate(ParamId(i), b);
            }
        }
    }

    pub fn scale(&mut self, k: S) {
        for buf in self.bufs.iter_mut().flatten() {
            for x in buf.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn global_norm(&self) -> S {
        self.bufs
            .iter()
            .flatten()
            .flat_map(|b| b.iter())
            .map(|&x| x * x)
            .sum::<S>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.bufs
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_deref().map(|b| (ParamId(i), b)))
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.iter().all(Option::is_none)
    }
}
