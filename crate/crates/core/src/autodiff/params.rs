use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter {}", name)));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Records every parameter as a leaf, in store order.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Gradients for `vars` (as returned by [`ParamStore::register`]); zeros where none arrived.
    pub fn gradients(&self, tape: &Tape<T>, vars: &[Var]) -> Vec<Vec<T>> {
        self.entries
            .iter()
            .zip(vars)
            .map(|((_, t), v)| match tape.grad(*v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); t.len()],
            })
            .collect()
    }
}
