//! Named parameter storage shared by every trainable component.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::graph::{Gradients, Graph, Var};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Flat, name-ordered parameter map. Iteration order is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) {
        self.params.insert(name.into(), Param { tensor, frozen });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        p.frozen = frozen;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Binds a parameter into a graph; frozen parameters become constants.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        Ok(g.param(name, &p.tensor, !p.frozen))
    }

    /// Adds every matching gradient into the parameter gradient buffers.
    /// Names not in this store are ignored, so one gradient set can be
    /// split across device-side and server-side stores.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.named() {
            if let Some(p) = self.params.get_mut(name) {
                if !p.frozen {
                    p.tensor.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Copies of all trainable tensors, without gradient buffers.
    pub fn trainable(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, p)| {
                let mut t = p.tensor.clone();
                t.zero_grad();
                (k.clone(), t)
            })
            .collect()
    }

    /// Overwrites tensor values by name. Every name must exist with the same shape.
    pub fn load_values<'a>(
        &mut self,
        values: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        for (name, t) in values {
            let dst = self.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::shape("load_values", dst.shape(), t.shape()));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Largest absolute elementwise difference over the common parameter set.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.params
            .iter()
            .filter_map(|(k, p)| {
                other
                    .params
                    .get(k)
                    .map(|q| p.tensor.max_abs_diff(&q.tensor))
            })
            .fold(0.0, f64::max)
    }
}
