//! Binary checkpoint format.
//!
//! ```text
//! "MIXF" | version u32 | count u32 |
//!   count × ( name_len u32 | name utf-8 | rank u32 | dims u32 × rank | f32 × numel )
//! | crc32 u32 over every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"MIXF";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.element_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Named tensors in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!("file is only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch (stored {stored:08x}, computed {actual:08x}); file is corrupt or truncated"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&dims);
        let raw = r.take(n * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last entry", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    write_atomic(path, &encode(store))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&fs::read(path)?)
}

/// Copies checkpoint tensors into `store` by name. Every store parameter
/// must be present unless `may_skip` accepts its name; entries unknown to
/// the store are rejected likewise. Returns the names left untouched.
pub fn apply(
    store: &mut ParamStore<f32>,
    entries: Vec<(String, Tensor<f32>)>,
    may_skip: impl Fn(&str) -> bool,
) -> Result<Vec<String>> {
    let mut seen = vec![false; store.len()];
    for (name, t) in entries {
        match store.id(&name) {
            Some(id) => {
                let want = store.get(id).shape().to_vec();
                if t.shape() != want.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: checkpoint shape {:?} does not match model shape {want:?}",
                        t.shape()
                    )));
                }
                if seen[id.index()] {
                    return Err(Error::Checkpoint(format!("{name} appears twice")));
                }
                store.set(id, t)?;
                seen[id.index()] = true;
            }
            None if may_skip(&name) => {}
            None => {
                return Err(Error::Checkpoint(format!(
                    "{name} is not a parameter of this model (wrong preset or head?)"
                )))
            }
        }
    }
    let mut skipped = Vec::new();
    for (id, p) in store.iter() {
        if !seen[id.index()] {
            if !may_skip(&p.name) {
                return Err(Error::Checkpoint(format!("{} missing from checkpoint", p.name)));
            }
            skipped.push(p.name.clone());
        }
    }
    Ok(skipped)
}

/// Loads a complete checkpoint into `store`.
pub fn load_into(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    apply(store, read(path)?, |_| false).map(|_| ())
}
