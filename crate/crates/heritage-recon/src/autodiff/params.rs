//! Flat registry of named trainable tensors.
//!
//! Models hold `ParamRef`s into one shared `ParamSet`; the optimizer state and
//! checkpoints mirror it index-for-index.

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamRef(usize);

impl ParamRef {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Default, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamRef {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamRef(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, p: ParamRef) -> &Tensor {
        &self.values[p.0]
    }

    pub fn value_mut(&mut self, p: ParamRef) -> &mut Tensor {
        &mut self.values[p.0]
    }

    pub fn name(&self, p: ParamRef) -> &str {
        &self.names[p.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamRef> {
        self.names.iter().position(|n| n == name).map(ParamRef)
    }

    pub fn refs(&self) -> impl Iterator<Item = ParamRef> {
        (0..self.values.len()).map(ParamRef)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}
