use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 5] = b"PCKT1";

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert_with(name, tensor, true)
    }

    pub fn insert_with(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name.to_string(), Entry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::shape("ParamSet::set", entry.tensor.shape(), tensor.shape()));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .trainable = trainable;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.tensor, e.trainable))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Serialises into the `PCKT1` checkpoint layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, e) in &self.entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((e.tensor.rank() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut set = ParamSet::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            set.insert(&name, tensor)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, e) in &self.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.entries.insert(rest.to_string(), e.clone());
            }
        }
        out
    }

    /// Entries whose names do not start with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, e) in &self.entries {
            if !name.starts_with(prefix) {
                out.entries.insert(name.clone(), e.clone());
            }
        }
        out
    }

    /// Appends every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) -> Result<()> {
        for (name, t, trainable) in other.iter() {
            self.insert_with(&format!("{prefix}{name}"), t.clone(), trainable)?;
        }
        Ok(())
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated record".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}
