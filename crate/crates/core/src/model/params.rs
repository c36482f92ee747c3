use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grad::{Array, Graph, Var};

/// Named parameter arrays in a fixed order. The position of a parameter is
/// its slot in gradient maps and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let slot = self.arrays.len();
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        self.arrays.push(value);
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.slot(name).map(|s| &self.arrays[s])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.slot(name).map(move |s| &mut self.arrays[s])
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn array(&self, slot: usize) -> &Array {
        &self.arrays[slot]
    }

    pub fn array_mut(&mut self, slot: usize) -> &mut Array {
        &mut self.arrays[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    /// Count of scalars in parameters whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, a)| a.len())
            .sum()
    }

    /// Creates one graph leaf per parameter.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .arrays
            .iter()
            .enumerate()
            .map(|(slot, a)| graph.param(slot, a.clone()))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    /// Names existing graph nodes as this store's parameters, in slot order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.arrays.len() {
            return Err(Error::LengthMismatch {
                expected: self.arrays.len(),
                got: vars.len(),
            });
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Arrays in slot order.
    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }
}

/// Graph leaves for a [`ParamStore`], looked up by name.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&s| self.vars[s])
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }
}
