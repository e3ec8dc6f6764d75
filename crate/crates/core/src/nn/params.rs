use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Running statistics are stored alongside weights but never optimized.
    pub trainable: bool,
}

impl Param {
    pub fn zeros(shape: &[usize], trainable: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            trainable,
        }
    }

    pub fn filled(shape: &[usize], value: f64, trainable: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            trainable,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named parameter arrays, ordered by name so iteration is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    /// Checks that `name` exists with exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Param> {
        let p = self.get(name)?;
        if p.shape != shape {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                p.shape
            )));
        }
        Ok(p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(Param::numel)
            .sum()
    }

    /// Zeroed copy of the trainable entries, used as a gradient accumulator.
    pub fn zeros_like_trainable(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(k, p)| (k.clone(), Param::zeros(&p.shape, true)))
                .collect(),
        }
    }

    /// Adds `other` entry-wise, inserting entries that are absent here.
    pub fn accumulate(&mut self, other: &ParamStore) {
        for (k, p) in &other.entries {
            match self.entries.get_mut(k) {
                Some(dst) => {
                    for (a, b) in dst.data.iter_mut().zip(&p.data) {
                        *a += b;
                    }
                }
                None => {
                    self.entries.insert(k.clone(), p.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.entries.values_mut() {
            p.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Accumulates into `name`, creating a zero entry of `shape` first.
    pub(crate) fn grad_slot(&mut self, name: &str, shape: &[usize]) -> &mut [f64] {
        &mut self
            .entries
            .entry(name.to_string())
            .or_insert_with(|| Param::zeros(shape, true))
            .data
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}
