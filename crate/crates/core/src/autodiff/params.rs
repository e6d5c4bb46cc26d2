use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Grid;

/// Named parameters in insertion order. The position of a parameter is its id
/// on a [`Tape`](super::Tape).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Grid>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Grid) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name:?}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Grid {
        &self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Grid> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn values(&self) -> &[Grid] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Grid] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Grid::len).sum()
    }

    /// Zero grids shaped like every parameter, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Grid> {
        self.values.iter().map(|g| Grid::zeros(g.height(), g.width(), g.channels())).collect()
    }
}
