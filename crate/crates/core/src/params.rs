//! Named, ordered parameter storage shared by every component.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sleepgate_tensor::{Graph, Result as TResult, Scalar, Tensor, Var};

use crate::rng::Rng;

/// Parameter groups. The first dot-separated segment of a name selects one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Base,
    Tagger,
    Gate,
    /// Keep/compress/evict logits; only used by the hard-eviction variant
    /// and not part of the reported totals.
    GateAction,
    Consolidation,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Base,
        Component::Tagger,
        Component::Gate,
        Component::GateAction,
        Component::Consolidation,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Base => "base",
            Component::Tagger => "tagger",
            Component::Gate => "gate",
            Component::GateAction => "action",
            Component::Consolidation => "cons",
        }
    }

    pub fn of(name: &str) -> Option<Component> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|c| c.prefix() == head)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Scalar = f32> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Panics if missing; for names the crate itself registered.
    pub fn expect(&self, name: &str) -> &Tensor<S> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.entries[i].1
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn count(&self, component: Component) -> usize {
        self.iter()
            .filter(|(n, _)| Component::of(n) == Some(component))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Places every parameter with a matching component on the graph.
    /// Parameters whose component is in `trainable` are tracked.
    pub fn bind(
        &self,
        g: &mut Graph<S>,
        include: &[Component],
        trainable: &[Component],
    ) -> TResult<Binding> {
        let mut vars = HashMap::new();
        for (i, (name, t)) in self.entries.iter().enumerate() {
            let Some(c) = Component::of(name) else { continue };
            if !include.contains(&c) {
                continue;
            }
            let v = g.leaf(t.clone(), trainable.contains(&c))?;
            vars.insert(name.clone(), (i, v));
        }
        Ok(Binding { vars })
    }
}

/// Parameter name → graph variable for one graph.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: HashMap<String, (usize, Var)>,
}

impl Binding {
    /// Binds caller-created variables to `(name, store index)` pairs.
    pub fn from_vars(entries: impl IntoIterator<Item = (String, usize, Var)>) -> Self {
        Self { vars: entries.into_iter().map(|(n, i, v)| (n, (i, v))).collect() }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound")).1
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).map(|p| p.1)
    }

    /// Gradients of tracked parameters as `(store index, gradient)`.
    pub fn grads<S: Scalar>(&self, g: &Graph<S>) -> Vec<(usize, Vec<S>)> {
        let mut out: Vec<_> = self
            .vars
            .values()
            .filter_map(|&(i, v)| g.grad(v).map(|gr| (i, gr.to_vec())))
            .collect();
        out.sort_by_key(|p| p.0);
        out
    }
}

/// Fills a fresh tensor with N(0, std²) draws.
pub fn normal_tensor(shape: &[usize], std: f32, rng: &mut Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std).expect("valid std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Uniform draw in the open interval (0, 1).
pub fn open_unit(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}
