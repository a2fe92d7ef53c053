//! Named parameter storage and its on-disk container.
//!
//! Layout: 8 magic bytes `LEUQPT1\0`, a little-endian `u64` manifest length,
//! the JSON manifest, then the concatenated little-endian `f64` payloads at
//! the byte offsets listed in the manifest (relative to payload start).

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LEUQPT1\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Digest over all names and values; equal stores hash equal.
    pub fn checksum(&self) -> u64 {
        self.iter().fold(0u64, |acc, (name, t)| {
            let mut h = acc.rotate_left(5) ^ t.checksum();
            for b in name.bytes() {
                h = h.wrapping_mul(31).wrapping_add(u64::from(b));
            }
            h
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Serialize `store` plus an arbitrary JSON `meta` block.
pub fn write_params<W: Write>(mut w: W, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut offset = 0u64;
    let tensors = store
        .iter()
        .map(|(name, t)| {
            let len = (t.numel() * 8) as u64;
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len,
            };
            offset += len;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        version: VERSION,
        tensors,
        meta,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, t) in store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("checkpoint truncated in header".into()))?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest)
        .map_err(|_| Error::Format("checkpoint truncated in manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    if manifest.version != VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: VERSION,
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > payload.len() || e.len as usize != e.shape.iter().product::<usize>() * 8 {
            return Err(Error::Format(format!("tensor {} out of payload bounds", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.add(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((store, manifest.meta))
}

pub fn save_params(path: impl AsRef<Path>, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_params(&mut w, store, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = std::fs::read(path)?;
    read_params(bytes.as_slice())
}
