use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::shape("params", format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::shape("params", format!("missing tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }
}

/// Parameters placed on a graph, either as leaves (trainable) or constants.
pub struct Bound {
    vars: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

impl Bound {
    pub fn bind(g: &mut Graph, params: &ParamStore, trainable: impl Fn(&str) -> bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        let mut names = Vec::new();
        for (name, t) in params.iter() {
            let v = if trainable(name) {
                names.push(name.to_string());
                g.leaf(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.to_string(), v);
        }
        Ok(Bound {
            vars,
            trainable: names,
        })
    }

    /// All parameters as constants.
    pub fn frozen(g: &mut Graph, params: &ParamStore) -> Result<Self> {
        Self::bind(g, params, |_| false)
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    /// Gradients of every trainable parameter, by name.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<(String, Tensor)> {
        self.trainable
            .iter()
            .map(|n| (n.clone(), grads.take(self.var(n))))
            .collect()
    }
}
