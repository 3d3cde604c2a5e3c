use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter table. The name set is fixed once built; only values and
/// trainability flags change afterwards.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Default)]
pub struct ParamStoreBuilder {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStoreBuilder {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(
            name,
            ParamEntry {
                tensor,
                trainable: false,
            },
        );
        Ok(())
    }

    pub fn build(self) -> ParamStore {
        ParamStore {
            entries: self.entries,
        }
    }
}

impl ParamStore {
    pub fn builder() -> ParamStoreBuilder {
        ParamStoreBuilder::default()
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

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Marks exactly the entries matching `pred` as trainable; everything else is frozen.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, entry) in &mut self.entries {
            entry.trainable = pred(name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn numel_where(&self, pred: impl Fn(&str, &ParamEntry) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(k, e)| pred(k, e))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    /// Replaces the values of an existing tensor. Shapes must agree.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "{name}: expected shape {:?}, got {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.entries.get_mut(name).map(|e| e.tensor.data_mut())
    }

    /// Raw bytes of every frozen tensor, for freeze-contract audits.
    pub fn frozen_snapshot(&self) -> BTreeMap<String, Vec<u8>> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.trainable)
            .map(|(k, e)| (k.clone(), e.tensor.to_le_bytes()))
            .collect()
    }

    /// Names whose bytes differ from an earlier [`frozen_snapshot`](Self::frozen_snapshot).
    pub fn changed_since(&self, snapshot: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
        snapshot
            .iter()
            .filter(|(name, bytes)| {
                self.entries
                    .get(*name)
                    .is_none_or(|e| &e.tensor.to_le_bytes() != *bytes)
            })
            .map(|(name, _)| name.clone())
            .collect()
    }
}
