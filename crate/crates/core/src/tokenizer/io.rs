//! Codebook files and code exports.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::rq::CodebookStack;
use super::trie::Trie;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ORQC";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Layout: magic, version, `N_t`, `L_t`, item rows, item cols, centroids as
/// little-endian f64 (layer-major), then the trie as a leaf count followed by
/// `(codes, item count, items)` records.
pub fn write_codebook(w: &mut impl Write, cb: &CodebookStack) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, cb.n_t)?;
    put_u32(w, cb.l_t())?;
    put_u32(w, cb.item_shape.0)?;
    put_u32(w, cb.item_shape.1)?;
    for layer in &cb.layers {
        for v in layer {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let entries = cb.trie.entries();
    put_u32(w, entries.len())?;
    for (codes, items) in entries {
        for c in codes {
            put_u32(w, c)?;
        }
        put_u32(w, items.len())?;
        for i in items {
            put_u32(w, i)?;
        }
    }
    Ok(())
}

pub fn read_codebook(r: &mut impl Read) -> Result<CodebookStack> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a codebook file".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported codebook version {version}"
        )));
    }
    let n_t = get_u32(r)?;
    let l_t = get_u32(r)?;
    let item_shape = (get_u32(r)?, get_u32(r)?);
    let dim = item_shape.0 * item_shape.1;
    let mut layers = Vec::with_capacity(l_t);
    let mut buf = [0u8; 8];
    for _ in 0..l_t {
        let mut layer = Vec::with_capacity(n_t * dim);
        for _ in 0..n_t * dim {
            r.read_exact(&mut buf)?;
            layer.push(f64::from_le_bytes(buf));
        }
        layers.push(layer);
    }
    let mut trie = Trie::new(l_t);
    let leaves = get_u32(r)?;
    for _ in 0..leaves {
        let codes = (0..l_t).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        if codes.iter().any(|&c| c >= n_t) {
            return Err(Error::Format(format!("code outside codebook in {codes:?}")));
        }
        let count = get_u32(r)?;
        for _ in 0..count {
            trie.insert(&codes, get_u32(r)?);
        }
    }
    Ok(CodebookStack {
        n_t,
        item_shape,
        layers,
        trie,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub item_id: usize,
    pub codes: Vec<usize>,
}

pub fn write_codes_jsonl(w: &mut impl Write, codes: &[Vec<usize>]) -> Result<()> {
    for (item_id, c) in codes.iter().enumerate() {
        let rec = CodeRecord {
            item_id,
            codes: c.clone(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads code records back into an item-indexed table.
pub fn read_codes_jsonl(r: impl BufRead) -> Result<Vec<Vec<usize>>> {
    let mut recs = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        recs.push(serde_json::from_str::<CodeRecord>(&line)?);
    }
    recs.sort_by_key(|r| r.item_id);
    for (i, r) in recs.iter().enumerate() {
        if r.item_id != i {
            return Err(Error::Format(format!("item ids not contiguous at {i}")));
        }
    }
    Ok(recs.into_iter().map(|r| r.codes).collect())
}
