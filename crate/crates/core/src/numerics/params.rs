use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Which side of the frozen/trainable split a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Backbone,
    Head,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Backbone => 0,
            Partition::Head => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Partition::Backbone),
            1 => Some(Partition::Head),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor<T>,
}

/// Named parameter tensors in registration order.
///
/// A frozen store hands out constant leaves: its tensors never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
    frozen: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), frozen: false }
    }

    pub fn add(&mut self, name: impl Into<String>, partition: Partition, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, partition, value });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn partition(&self, id: ParamId) -> Partition {
        self.entries[id.0].partition
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Number of scalar parameters in a partition.
    pub fn count(&self, partition: Partition) -> usize {
        self.entries.iter().filter(|e| e.partition == partition).map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), partition: e.partition, value: e.value.cast() })
                .collect(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }

    /// SHA-256 over names, shapes and values of one partition, in registration order.
    pub fn partition_hash(&self, partition: Partition) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for e in self.entries.iter().filter(|e| e.partition == partition) {
            hasher.update((e.name.len() as u32).to_le_bytes());
            hasher.update(e.name.as_bytes());
            for &d in e.value.shape() {
                hasher.update((d as u32).to_le_bytes());
            }
            for v in e.value.data() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Parameter initializers. All draw from the caller's generator so that a run has one
/// seeded source of randomness.
pub mod init {
    use super::*;

    pub fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-scale, scale);
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    /// Glorot-uniform for a `[fan_in, fan_out]` weight.
    pub fn xavier<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, &[fan_in, fan_out], scale)
    }
}
