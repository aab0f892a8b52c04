use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Named model parameters, kept in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total count of scalar learnables.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Freezes or unfreezes every parameter. Frozen parameters enter a tape
    /// as constants and never receive gradients.
    pub fn set_trainable(&mut self, on: bool) {
        for t in self.tensors.values_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Replaces values from a loaded name→tensor map. Names and shapes must
    /// agree exactly; all mismatches are reported together.
    pub fn load_from(&mut self, loaded: &IndexMap<String, Tensor>) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &self.tensors {
            match loaded.get(name) {
                None => problems.push(format!("{name} (missing)")),
                Some(l) if l.shape() != t.shape() => problems.push(format!(
                    "{name} (expected {:?}, found {:?})",
                    t.shape(),
                    l.shape()
                )),
                Some(_) => {}
            }
        }
        for name in loaded.keys() {
            if !self.tensors.contains_key(name) {
                problems.push(format!("{name} (unexpected)"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Dimension(format!(
                "weights do not fit the model: {}",
                problems.join(", ")
            )));
        }
        for (name, t) in self.tensors.iter_mut() {
            let trainable = t.requires_grad();
            let src = &loaded[name];
            let mut fresh = Tensor::new(src.shape().to_vec(), src.data().to_vec())?;
            fresh.set_requires_grad(trainable);
            *t = fresh;
        }
        Ok(())
    }

    /// Plain name→value copy, without gradient state.
    pub fn to_map(&self) -> IndexMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|(k, v)| {
                let plain = Tensor::new(v.shape().to_vec(), v.data().to_vec())
                    .expect("shape already validated")
                    .to_dtype(v.dtype());
                (k.clone(), plain)
            })
            .collect()
    }
}
