//! Binary model container.
//!
//! ```text
//! "DVGN" | version u16 | record count u32
//! per record: name length u16 | name bytes | rank u8 | dims u32 * rank | f64 * numel
//! ```
//!
//! All integers and floats are little-endian; records are in name order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DVGN";
pub const VERSION: u16 = 1;

pub fn encode_store(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Model(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Model(format!("rank too large for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Model(format!("dimension too large for {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Model(format!("truncated model file at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_store(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Model("not a model file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Model(format!("unsupported model version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Model("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Model(format!("{} trailing bytes after records", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    crate::io::write_atomic(path, &encode_store(store)?)
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode_store(&std::fs::read(path)?)
}

/// Parameters whose names start with `prefix`.
pub fn subset(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        out.insert(name, t.clone());
    }
    out
}

/// Union of stores; later stores win on name clashes.
pub fn merge(stores: &[&ParamStore]) -> ParamStore {
    let mut out = ParamStore::new();
    for s in stores {
        for (name, t) in s.iter() {
            out.insert(name, t.clone());
        }
    }
    out
}
