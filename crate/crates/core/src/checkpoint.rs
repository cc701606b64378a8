//! `FSQ1` checkpoint archives.
//!
//! Layout, all integers unsigned 64-bit little-endian:
//!
//! ```text
//! "FSQ1" count
//! count × { name_len name rank dims[rank] f32_le[product(dims)] frozen:u8 }
//! meta_count
//! meta_count × { key_len key value_len value }
//! ```
//!
//! Values are stored as 32-bit floats, so a model written out and read back
//! equals the original only if its values were already `f32`-representable;
//! [`quantize`] does that rounding for trainers that hand models off through
//! checkpoints. Bytes read and rewritten are always identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Parameter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSQ1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub frozen: bool,
}

impl CheckpointEntry {
    /// The raw little-endian bytes of the stored values.
    pub fn value_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|&v| v as f32).collect(),
                frozen: p.frozen,
            })
            .collect();
        Checkpoint {
            entries,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            let data = e.data.iter().map(|&v| v as f64).collect();
            let mut p = Parameter::new(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            p.frozen = e.frozen;
            store.insert(p)?;
        }
        Ok(store)
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a CheckpointEntry> + 'a {
        self.entries.iter().filter(move |e| e.name.starts_with(prefix))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks metadata key `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, self.entries.len() as u64);
        for e in &self.entries {
            put_str(&mut out, &e.name);
            put_u64(&mut out, e.shape.len() as u64);
            for &d in &e.shape {
                put_u64(&mut out, d as u64);
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(e.frozen as u8);
        }
        put_u64(&mut out, self.meta.len() as u64);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected FSQ1".into()));
        }
        let count = r.len()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.len()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}`: shape overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("`{name}` holds non-finite values")));
            }
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("`{name}`: bad frozen flag {b}"))),
            };
            entries.push(CheckpointEntry { name, shape, data, frozen });
        }
        let mut meta = BTreeMap::new();
        let meta_count = r.len()?;
        for _ in 0..meta_count {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { entries, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Rounds every value to the nearest `f32`.
pub fn quantize(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        for v in p.value.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} too large")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}
