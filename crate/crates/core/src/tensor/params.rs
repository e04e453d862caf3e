use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameters in insertion order, plus freeze horizons.
///
/// A parameter frozen until step `s` receives no update while the
/// optimizer step counter is below `s`.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T> {
    tensors: IndexMap<String, Tensor<T>>,
    frozen: BTreeMap<String, u64>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            tensors: IndexMap::new(),
            frozen: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t.with_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Freezes every parameter whose name satisfies `predicate` until
    /// `until_step`. `until_step == 0` clears the freeze for those names.
    /// Returns the number of matched parameters; matching nothing is an error.
    pub fn set_frozen(&mut self, predicate: impl Fn(&str) -> bool, until_step: u64) -> Result<usize> {
        let matched: Vec<String> = self.tensors.keys().filter(|n| predicate(n)).cloned().collect();
        if matched.is_empty() {
            return Err(Error::Contract("freeze selector matched no parameter".into()));
        }
        for name in &matched {
            if until_step == 0 {
                self.frozen.remove(name);
            } else {
                self.frozen.insert(name.clone(), until_step);
            }
        }
        Ok(matched.len())
    }

    pub fn is_frozen(&self, name: &str, step: u64) -> bool {
        self.frozen.get(name).is_some_and(|&until| step < until)
    }

    pub fn frozen_horizons(&self) -> &BTreeMap<String, u64> {
        &self.frozen
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Records every parameter on `graph` and returns name → handle.
    pub fn bind(&self, graph: &mut Graph<T>) -> Result<Bindings> {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), graph.param(name, t)?);
        }
        Ok(Bindings { vars })
    }
}

/// Parameter handles for one graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }
}
