use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Parameter groups. Freezing is decided per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Embeddings,
    Encoder,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Embeddings, Group::Encoder, Group::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Embeddings => "embeddings",
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Arc<Array2<T>>,
}

/// Named arrays, each in exactly one group, in a fixed creation order.
#[derive(Clone, Debug)]
pub struct ParameterStore<T> {
    params: Vec<Param<T>>,
    trainable: [bool; 3],
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), trainable: [true; 3] }
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, group: Group, value: Array2<T>) -> usize {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, group, value: Arc::new(value) });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub(crate) fn shared(&self, index: usize) -> Arc<Array2<T>> {
        Arc::clone(&self.params[index].value)
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Array2<T> {
        Arc::make_mut(&mut self.params[index].value)
    }

    pub fn set_trainable(&mut self, group: Group, trainable: bool) {
        self.trainable[group.slot()] = trainable;
    }

    pub fn group_trainable(&self, group: Group) -> bool {
        self.trainable[group.slot()]
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.group_trainable(self.params[index].group)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and values of one group (all groups if `None`).
    pub fn checksum(&self, group: Option<Group>) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
            hasher.update(p.name.as_bytes());
            let (r, c) = p.value.dim();
            hasher.update((r as u64).to_le_bytes());
            hasher.update((c as u64).to_le_bytes());
            for &x in p.value.iter() {
                hasher.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Converts every array to another scalar type, keeping order and flags.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: Arc::new(p.value.mapv(|x| U::from_f64_lossy(x.to_f64_lossy()))),
                })
                .collect(),
            trainable: self.trainable,
        }
    }
}
