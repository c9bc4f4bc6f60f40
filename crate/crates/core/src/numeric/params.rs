use std::collections::HashMap;

use super::graph::Bindings;
use super::{NamedTensors, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Kept on the client, never aggregated.
    pub personal: bool,
}

/// Ordered table of named parameters. Insertion order is the stable
/// serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTable {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, personal: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            personal,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn is_personal(&self, name: &str) -> Option<bool> {
        self.index.get(name).map(|&i| self.entries[i].personal)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn personal_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.personal)
            .map(|e| e.name.clone())
            .collect()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Partitions into (base, personal) by the personal flag.
    pub fn split(&self) -> (NamedTensors, NamedTensors) {
        let mut base = NamedTensors::new();
        let mut personal = NamedTensors::new();
        for e in &self.entries {
            let side = if e.personal { &mut personal } else { &mut base };
            side.insert(e.name.clone(), e.tensor.clone());
        }
        (base, personal)
    }

    pub fn to_named(&self) -> NamedTensors {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    }

    /// Overwrites the named tensors. Every name must exist with the same shape.
    pub fn assign(&mut self, values: &NamedTensors) -> Result<()> {
        for (name, t) in values {
            let slot = self
                .get_mut(name)
                .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Argument(format!(
                    "parameter `{name}` has shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Rebuilds a full table from a split; the inverse of [`ParamTable::split`].
    pub fn merged(&self, base: &NamedTensors, personal: &NamedTensors) -> Result<ParamTable> {
        let mut out = self.clone();
        out.assign(base)?;
        out.assign(personal)?;
        Ok(out)
    }
}

impl Bindings for ParamTable {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}
