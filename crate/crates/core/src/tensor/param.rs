use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors that persist across steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f64> {
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.params.insert(name.into(), t);
    }

    /// Inserts `name` only if absent, returning whether it was added.
    pub fn insert_new(&mut self, name: impl Into<String>, t: Tensor<S>) -> bool {
        use std::collections::btree_map::Entry;
        match self.params.entry(name.into()) {
            Entry::Vacant(e) => {
                e.insert(t);
                true
            }
            Entry::Occupied(_) => false,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every entry of `other` whose name starts with `prefix`,
    /// renaming the prefix to `new_prefix`.
    pub fn copy_prefixed(&mut self, other: &ParamStore<S>, prefix: &str, new_prefix: &str) {
        for (k, v) in other.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                self.insert(format!("{new_prefix}{rest}"), v.clone());
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

impl<S: Scalar> FromIterator<(String, Tensor<S>)> for ParamStore<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        ParamStore {
            params: iter.into_iter().collect(),
        }
    }
}
