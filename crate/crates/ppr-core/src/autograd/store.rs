//! Named parameter storage with deterministic iteration order.

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// An ordered name → tensor map. Iteration follows insertion order, so
/// optimizers, checkpoints, and gradient collection all see parameters
/// in the same sequence on every run.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert_with(name, tensor, true)
    }

    /// Insert a tensor the optimizer must leave untouched.
    pub fn insert_frozen(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert_with(name, tensor, false)
    }

    fn insert_with(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.index_of(name).is_some() {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    /// Replace the value of an existing parameter. The shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if self.entries[i].tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "param-set",
                lhs: self.entries[i].tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        self.entries[i].tensor = tensor;
        Ok(())
    }

    /// Add `delta` to one element in place; used by finite differencing.
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let data = self.entries[i].tensor.make_mut();
        data[index] += delta;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.tensor, e.trainable))
    }

    pub fn iter_trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Total element count across trainable tensors only.
    pub fn num_trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// True when both stores hold the same names, flags, and bit-equal
    /// tensor contents, in the same order.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|(a, b)| {
                    a.name == b.name && a.trainable == b.trainable && a.tensor.bit_eq(&b.tensor)
                })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_preserved() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::zeros(vec![1])).unwrap();
        store.insert("a", Tensor::zeros(vec![2])).unwrap();
        store.insert("c", Tensor::zeros(vec![3])).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["b", "a", "c"]);
        assert_eq!(store.num_elements(), 6);
    }

    #[test]
    fn duplicate_and_unknown_names_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(
            store.insert("w", Tensor::zeros(vec![2])),
            Err(Error::DuplicateParam(_))
        ));
        assert!(matches!(store.get("v"), Err(Error::UnknownParam(_))));
        assert!(matches!(
            store.set("v", Tensor::zeros(vec![2])),
            Err(Error::UnknownParam(_))
        ));
    }

    #[test]
    fn set_enforces_shape() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(
            store.set("w", Tensor::zeros(vec![3, 2])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn frozen_entries_excluded_from_trainable_iter() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![4])).unwrap();
        store.insert_frozen("mask", Tensor::zeros(vec![7])).unwrap();
        let trainable: Vec<&str> = store.iter_trainable().map(|(n, _)| n).collect();
        assert_eq!(trainable, vec!["w"]);
        assert_eq!(store.num_trainable_elements(), 4);
        assert_eq!(store.num_elements(), 11);
    }

    #[test]
    fn perturb_changes_single_element() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]))
            .unwrap();
        store.perturb("w", 1, 0.5).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, 2.5, 3.0]);
    }
}
