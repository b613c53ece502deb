//! Named parameter registry shared by model assembly, the optimizer, and
//! checkpoint serialization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered name -> tensor map. Order is insertion order and is part of the
/// contract: the optimizer binds moments to it and checkpoints serialize it.
///
/// Entries whose name starts with `stats.` are bookkeeping tensors
/// (normalization statistics and the like): they persist in checkpoints but
/// are excluded from optimization.
#[derive(Debug)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Names of trainable parameters, in insertion order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(n, _)| !n.starts_with("stats."))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Tensors for the given names, in that order.
    pub fn select(&self, names: &[String]) -> Vec<&Tensor<T>> {
        names
            .iter()
            .map(|n| self.get(n).expect("selected parameter exists"))
            .collect()
    }

    /// Mutable tensors for the given names, in that order (duplicates are
    /// impossible: `insert` rejects repeated names).
    pub fn select_mut(&mut self, names: &[String]) -> Vec<&mut Tensor<T>> {
        let mut found: Vec<(usize, &mut Tensor<T>)> = Vec::with_capacity(names.len());
        for (n, t) in self.entries.iter_mut() {
            if let Some(pos) = names.iter().position(|m| m == n) {
                found.push((pos, t));
            }
        }
        assert_eq!(found.len(), names.len(), "select_mut: every name must exist");
        found.sort_by_key(|(p, _)| *p);
        found.into_iter().map(|(_, t)| t).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// Parameters registered on a tape for one forward/backward pass.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    /// Registers every entry of `params` on the tape. `stats.` entries are
    /// bound as constants, everything else as trainable.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Self {
        let vars = params
            .entries
            .iter()
            .map(|(n, t)| {
                let var = if n.starts_with("stats.") {
                    tape.leaf(t.clone())
                } else {
                    tape.param(t.clone())
                };
                (n.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ParamSet::<f32>::new();
        p.insert("b", Tensor::zeros(&[2]));
        p.insert("a", Tensor::zeros(&[3]));
        p.insert("stats.mean", Tensor::zeros(&[3]));
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b", "a", "stats.mean"]);
        assert_eq!(p.trainable_names(), vec!["b".to_string(), "a".to_string()]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_are_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[1]));
        p.insert("w", Tensor::zeros(&[1]));
    }

    #[test]
    fn stats_entries_bind_as_constants() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::scalar(2.0));
        p.insert("stats.mean", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p);
        let w = bound.var("w");
        let m = bound.var("stats.mean");
        let x = tape.mul(w, m);
        let grads = tape.backward(x);
        assert!(grads.get(w).is_some());
        assert!(grads.get(m).is_none());
    }
}
