use std::collections::HashSet;
use std::path::Path;

use crate::codec::{dim_u32, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Partition, Tensor};

const MAGIC: &[u8; 4] = b"HVK1";
const VERSION: u32 = 1;

/// Prefix of scalar entries that record the model shape instead of weights.
pub const META_PREFIX: &str = "meta.";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named f32 tensors with their partition tags, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Every parameter of `store` followed by `meta` scalars as `meta.{key}` entries.
    pub fn from_store(store: &ParamStore<f32>, meta: &[(&str, f32)]) -> Result<Self> {
        let mut c = Checkpoint::default();
        for (key, value) in meta {
            c.push(CheckpointEntry {
                name: format!("{META_PREFIX}{key}"),
                partition: Partition::Head,
                shape: vec![],
                data: vec![*value],
            })?;
        }
        for e in store.entries() {
            c.push(CheckpointEntry {
                name: e.name.clone(),
                partition: e.partition,
                shape: e.value.shape().to_vec(),
                data: e.value.data().to_vec(),
            })?;
        }
        Ok(c)
    }

    pub fn push(&mut self, entry: CheckpointEntry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::DuplicateName(entry.name));
        }
        if entry.shape.iter().product::<usize>() != entry.data.len() {
            return Err(Error::shape(format!("entry {}: shape {:?} with {} values", entry.name, entry.shape, entry.data.len())));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn meta(&self, key: &str) -> Option<f32> {
        self.get(&format!("{META_PREFIX}{key}")).and_then(|e| e.data.first().copied())
    }

    /// A meta value that must be a non-negative integer.
    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self.meta(key).ok_or_else(|| Error::Malformed(format!("checkpoint lacks {META_PREFIX}{key}")))?;
        if !(v >= 0.0 && v.fract() == 0.0) {
            return Err(Error::Malformed(format!("{META_PREFIX}{key} = {v} is not a count")));
        }
        Ok(v as usize)
    }

    /// Weight entries, skipping meta scalars.
    pub fn tensors(&self) -> impl Iterator<Item = &CheckpointEntry> {
        self.entries.iter().filter(|e| !e.name.starts_with(META_PREFIX))
    }

    /// Overwrites every store parameter with the entry of the same name. The checkpoint must
    /// hold exactly the store's tensors, with matching shapes and partitions.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let mut seen = 0;
        for e in self.tensors() {
            let id = store.id(&e.name).ok_or_else(|| Error::Malformed(format!("unexpected tensor {:?}", e.name)))?;
            if store.get(id).shape() != e.shape.as_slice() || store.partition(id) != e.partition {
                return Err(Error::shape(format!(
                    "{}: checkpoint {:?}/{:?}, model {:?}/{:?}",
                    e.name,
                    e.shape,
                    e.partition,
                    store.get(id).shape(),
                    store.partition(id)
                )));
            }
            *store.get_mut(id) = Tensor::new(e.shape.clone(), e.data.clone())?;
            seen += 1;
        }
        if seen != store.len() {
            return Err(Error::Malformed(format!("checkpoint holds {seen} of {} model tensors", store.len())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(dim_u32(self.entries.len(), "entry count")?);
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("tensor name too long: {}", e.name)))?;
            let ndim = u8::try_from(e.shape.len()).map_err(|_| Error::Invalid(format!("too many dims for {}", e.name)))?;
            w.u16(len);
            w.bytes(name);
            w.u8(e.partition.tag());
            w.u8(ndim);
            for &d in &e.shape {
                w.u32(dim_u32(d, "tensor dim")?);
            }
            w.f32s(&e.data);
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        Ok(w.buf)
    }

    /// Parses a whole file; nothing is returned unless every byte checks out.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated { needed: 4, available: bytes.len() });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader::new(body);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let n = r.u32()? as usize;
        let mut c = Checkpoint::default();
        let mut names = HashSet::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name =
                std::str::from_utf8(r.take(len)?).map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?.to_string();
            if !names.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let tag = r.u8()?;
            let partition =
                Partition::from_tag(tag).ok_or_else(|| Error::Malformed(format!("partition tag {tag} for {name}")))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("dims of {name} overflow")))?;
            let data = r.f32s(count)?;
            c.entries.push(CheckpointEntry { name, partition, shape, data });
        }
        r.finish()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}
