use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, kept in name order so iteration is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Arc<Tensor>>,
    /// Rows of a parameter that must never move (frozen OOV embedding rows).
    frozen_rows: BTreeMap<String, Vec<usize>>,
    seed: u64,
}

impl ParameterSet {
    pub fn new(seed: u64) -> Self {
        ParameterSet {
            seed,
            ..Default::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn glorot<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) {
        self.insert(name, Tensor::glorot(rows, cols, rng));
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn freeze_rows(&mut self, name: &str, mut rows: Vec<usize>) {
        rows.sort_unstable();
        rows.dedup();
        self.frozen_rows.insert(name.to_string(), rows);
    }

    pub fn frozen_rows(&self, name: &str) -> &[usize] {
        self.frozen_rows.get(name).map_or(&[], Vec::as_slice)
    }

    /// Merge another set into this one; names must not collide.
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (k, v) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(Error::invalid(format!("duplicate parameter `{k}`")));
            }
            self.tensors.insert(k, v);
        }
        self.frozen_rows.extend(other.frozen_rows);
        Ok(())
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config,
            params: self
                .tensors
                .iter()
                .map(|(name, t)| NamedArray {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
            frozen_rows: self.frozen_rows.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut set = ParameterSet::new(ckpt.seed);
        for p in &ckpt.params {
            let [rows, cols] = match p.shape.as_slice() {
                [r, c] => [*r, *c],
                other => {
                    return Err(Error::invalid(format!(
                        "parameter `{}` has rank {} (expected 2)",
                        p.name,
                        other.len()
                    )))
                }
            };
            set.insert(p.name.clone(), Tensor::new(rows, cols, p.values.clone())?);
        }
        set.frozen_rows = ckpt.frozen_rows.clone();
        Ok(set)
    }
}

pub const CHECKPOINT_FORMAT: &str = "ksgrank-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk parameter container. Serialised as JSON; field and parameter
/// order are fixed so identical parameters give identical bytes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub params: Vec<NamedArray>,
    #[serde(default)]
    pub frozen_rows: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}
