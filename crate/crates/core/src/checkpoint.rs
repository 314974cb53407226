//! Binary parameter checkpoints.
//!
//! Layout: the magic `LCAP1\n`, then one record per parameter in name order:
//! `u32` name length, UTF-8 name, `u32` rank, `u32` per dim, then the values
//! as little-endian `f64`. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"LCAP1\n";

/// A decoded checkpoint record.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

pub fn write<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    for id in store.sorted_ids() {
        let p = store.get(id);
        w.write_all(&u32_of(p.name.len(), "name length")?.to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.tensor.shape();
        w.write_all(&u32_of(shape.len(), "rank")?.to_le_bytes())?;
        for &d in shape {
            w.write_all(&u32_of(d, "dim")?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor.len() * 8);
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    write(&mut out, store).expect("writing to a Vec cannot fail");
    out
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(file), store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated {what} at byte {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Decodes every record, checking the magic, name order and lengths.
pub fn parse(bytes: &[u8]) -> Result<Vec<Entry>> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint("missing LCAP1 header".into()));
    }
    let mut c = Cursor {
        bytes,
        at: MAGIC.len(),
    };
    let mut out: Vec<Entry> = Vec::new();
    while c.at < bytes.len() {
        let len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        if let Some(prev) = out.last() {
            if prev.name >= name {
                return Err(Error::Checkpoint(format!(
                    "records out of order: {:?} after {:?}",
                    name, prev.name
                )));
            }
        }
        let rank = c.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u32("dim")?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("shape {shape:?} overflows")))?;
        let data = c
            .take(count, "values")?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push(Entry {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(out)
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

/// Overwrites the values of `store` from a checkpoint. The checkpoint must
/// hold exactly the store's parameter names with matching shapes.
pub fn load_into(bytes: &[u8], store: &mut ParamStore) -> Result<()> {
    let entries = parse(bytes)?;
    let mut problems = Vec::new();
    for e in &entries {
        match store.id(&e.name) {
            None => problems.push(format!("unexpected parameter {}", e.name)),
            Some(id) if store.get(id).tensor.shape() != e.tensor.shape() => problems.push(format!(
                "{}: shape {:?} in checkpoint, {:?} in model",
                e.name,
                e.tensor.shape(),
                store.get(id).tensor.shape()
            )),
            Some(_) => {}
        }
    }
    let missing: Vec<_> = store
        .sorted_ids()
        .map(|id| store.get(id).name.clone())
        .filter(|n| entries.binary_search_by(|e| e.name.as_str().cmp(n)).is_err())
        .collect();
    problems.extend(missing.into_iter().map(|n| format!("missing parameter {n}")));
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }
    for e in entries {
        let id = store.id(&e.name).expect("checked above");
        store.get_mut(id).tensor = e.tensor;
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path)?;
    load_into(&bytes, store)
}
