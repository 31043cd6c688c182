//! Named parameter storage shared by every network.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose names start with `prefix`, in registration order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.names[id.0].starts_with(prefix))
            .collect()
    }

    /// Adds gradients for the listed parameters into their grad slots.
    /// Gradients for parameters outside `group` are discarded.
    pub fn accumulate(&mut self, grads: &Gradients, group: &[ParamId]) {
        for &id in group {
            if let Some(g) = grads.get(id) {
                let slot = self.tensors[id.0].grad_mut();
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Order-sensitive hash of the parameter values, used to detect updates.
    pub fn checksum(&self, id: ParamId) -> u64 {
        // FNV-1a over the raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.tensors[id.0].values() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.ids().map(|id| self.checksum(id)).collect()
    }
}

/// Parameter gradients produced by one backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub(crate) fn add(&mut self, id: ParamId, grad: &[f64]) {
        match self.by_param.get_mut(&id) {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => {
                self.by_param.insert(id, grad.to_vec());
            }
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_param.keys().copied()
    }
}
