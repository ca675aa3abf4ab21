use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Real, Result, Tensor};

/// Role of a trainable tensor; regularization applies to weights only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    tensor: Tensor<T>,
    kind: ParamKind,
}

/// Named trainable leaves, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f64> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) {
        self.entries.insert(name.into(), Entry { tensor, kind });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.kind, &e.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, ParamKind, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .map(|(k, e)| (k.as_str(), e.kind, &mut e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Scalar count restricted to names starting with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.tensor.len())
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.tensor.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}
