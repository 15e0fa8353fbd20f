use std::collections::BTreeMap;

use super::graph::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Learned weight.
    Weight,
    /// Non-learned state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: EntryKind,
    /// Frozen weights receive no gradient and are skipped by optimizers.
    pub frozen: bool,
}

impl<T: Element> Entry<T> {
    pub fn trainable(&self) -> bool {
        self.kind == EntryKind::Weight && !self.frozen
    }
}

/// Named parameter arrays, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: EntryKind) {
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad,
                kind,
                frozen: false,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Entry<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Entry<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))?;
        e.frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.entries.values_mut().for_each(|e| e.frozen = true);
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(T::zero());
        }
    }

    /// Adds graph gradients into matching trainable entries. Names not held by
    /// this set are ignored, so one gradient map can feed several sets.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (name, g) in &grads.by_param {
            if let Some(e) = self.entries.get_mut(name) {
                if e.trainable() {
                    e.grad.add_assign(g);
                }
            }
        }
    }

    /// Number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == EntryKind::Weight)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet<T> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Union of both sets; entries of `other` win on name clashes.
    pub fn merged(mut self, other: ParameterSet<T>) -> ParameterSet<T> {
        self.entries.extend(other.entries);
        self
    }

    /// Checks that both sets hold the same names with the same shapes.
    pub fn check_same_structure(&self, other: &ParameterSet<T>) -> Result<()> {
        let mut a = self.entries.iter();
        let mut b = other.entries.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((ka, ea)), Some((kb, eb))) => {
                    if ka != kb {
                        let first = if ka < kb { ka } else { kb };
                        return Err(Error::Validation(format!(
                            "parameter structure differs at {first}"
                        )));
                    }
                    if ea.value.shape() != eb.value.shape() {
                        return Err(Error::Validation(format!(
                            "parameter structure differs at {ka}: {:?} vs {:?}",
                            ea.value.shape(),
                            eb.value.shape()
                        )));
                    }
                }
                (Some((k, _)), None) | (None, Some((k, _))) => {
                    return Err(Error::Validation(format!(
                        "parameter structure differs at {k}"
                    )))
                }
            }
        }
    }

    pub fn cast<U: Element>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                            kind: e.kind,
                            frozen: e.frozen,
                        },
                    )
                })
                .collect(),
        }
    }
}
