//! Named parameter tensors with per-tensor frozen flags.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, frozen });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    /// Copy every tensor from `other`, which must have identical names and
    /// shapes in the same order. Frozen flags are kept from `self`.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Load(alloc::format!(
                "parameter count mismatch: model has {}, source has {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Load(alloc::format!(
                    "first mismatching tensor: model `{}` {:?} vs source `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
