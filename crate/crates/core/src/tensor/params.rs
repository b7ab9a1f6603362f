use std::collections::HashMap;

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named collection of parameter tensors.
///
/// Each tensor's `requires_grad` flag marks it trainable; frozen tensors are
/// bound as constants and never receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for t in &mut self.tensors {
            t.set_requires_grad(trainable);
        }
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Builds a set from checkpoint entries; every tensor is marked trainable.
    pub fn from_named(entries: Vec<(String, Tensor)>) -> Self {
        let mut set = Self::new();
        for (name, t) in entries {
            set.insert(name, t.with_grad(true));
        }
        set
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads(self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect())
    }
}

/// Gradients aligned index-for-index with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Tensor>);

impl ParamGrads {
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flat_map(|t| t.data().iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    /// Sums per-worker gradients in slice order so the result does not depend
    /// on how work was scheduled.
    pub fn sum_ordered(parts: &[ParamGrads], params: &ParamSet) -> ParamGrads {
        let mut total = params.zero_grads();
        for p in parts {
            total.add_assign(p);
        }
        total
    }
}

/// Lazily registers parameters of a [`ParamSet`] as graph leaves.
pub struct Binding<'a> {
    params: &'a ParamSet,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Binding<'a> {
    /// Trainable tensors become gradient-tracked leaves.
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            params,
            vars: vec![None; params.len()],
            track: true,
        }
    }

    /// Every tensor is bound as a constant.
    pub fn frozen(params: &'a ParamSet) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let i = self.params.position(name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let t = self.params.tensors[i].clone();
        let v = if self.track { g.leaf(t) } else { g.constant(t) };
        self.vars[i] = Some(v);
        Ok(v)
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.params.position(name).is_some_and(|i| self.vars[i].is_some())
    }

    /// Collects gradients in parameter order; unbound or frozen parameters
    /// get zeros.
    pub fn gradients(&self, grads: &mut Gradients) -> ParamGrads {
        ParamGrads(
            self.vars
                .iter()
                .zip(&self.params.tensors)
                .map(|(v, t)| v.and_then(|v| grads.take(v)).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect(),
        )
    }
}
