//! Versioned binary parameter files: magic, version, JSON header, then
//! named arrays stored as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore};
use crate::Scalar;

pub const VERSION: u32 = 1;

pub fn save<T: Scalar, H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    header: &H,
    store: &ParamStore<T>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(header)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &s in shape {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        for v in p.value().data() {
            w.write_all(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the header, lets `build` construct a model from it, then overwrites
/// that model's parameters by name (shapes must agree).
pub fn load<T: Scalar, H: DeserializeOwned, M>(
    path: &Path,
    magic: &[u8; 4],
    build: impl FnOnce(&H) -> Result<M>,
    store: impl FnOnce(&mut M) -> &mut ParamStore<T>,
) -> Result<M> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Cursor {
        bytes: &bytes,
        at: 0,
    };
    if r.take(4)? != magic {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let hlen = r.u64()? as usize;
    let header: H = serde_json::from_slice(r.take(hlen)?)?;
    let mut model = build(&header)?;
    let params = store(&mut model);
    let count = r.u64()? as usize;
    if count != params.len() {
        return Err(Error::Format(format!(
            "checkpoint: {count} params, model has {}",
            params.len()
        )));
    }
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let id = params
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint: unknown param {name}")))?;
        if params.value(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint: shape mismatch for {name}"
            )));
        }
        *params.get_mut(id).value_mut() = Array::new(shape, data)?;
    }
    if r.at != bytes.len() {
        return Err(Error::Format("checkpoint: trailing bytes".into()));
    }
    Ok(model)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format("checkpoint: truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
