//! Named parameter tensors and their binding onto a tape.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Parameters keyed by dotted name (`frontend.stage1.weight`). Iteration is
/// in name order, which fixes the layout of checkpoints and optimiser state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor4>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor4> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor4)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor4)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor4::len).sum()
    }

    /// Pushes every parameter onto `tape`. Parameters rejected by `trainable`
    /// become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        Bound { vars }
    }

    pub fn round_to_f32(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.round_to_f32()))
                .collect(),
        }
    }
}

/// Group of a parameter: its name without the trailing `.weight` / `.bias`.
pub fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// Parameters living on a particular tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// `(weight, bias)` of layer `name`; the bias is optional.
    pub fn layer(&self, name: &str) -> Result<(Var, Option<Var>)> {
        let w = self.var(&format!("{name}.weight"))?;
        Ok((w, self.vars.get(&format!("{name}.bias")).copied()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradient tensor per trainable parameter name.
    pub fn collect_grads(&self, tape: &Tape, grads: &mut Gradients) -> BTreeMap<String, Tensor4> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn groups_strip_suffix() {
        assert_eq!(group_of("frontend.stage1.weight"), "frontend.stage1");
        assert_eq!(group_of("plain"), "plain");
    }

    #[test]
    fn bind_respects_filter() {
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor4::zeros(Shape4::scalar()));
        p.insert("b.weight", Tensor4::zeros(Shape4::scalar()));
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, |n| n.starts_with("a."));
        assert!(tape.requires_grad(bound.var("a.weight").unwrap()));
        assert!(!tape.requires_grad(bound.var("b.weight").unwrap()));
        assert!(bound.var("c.weight").is_err());
    }
}
