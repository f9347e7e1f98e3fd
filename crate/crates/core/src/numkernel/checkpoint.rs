//! Flat binary parameter container: `"TEEG1"`, then per tensor
//! `u16 name_len | name | u8 rank | u32 dims... | f64 payload`, all little-endian.

use std::fs;
use std::path::Path;

use super::{KernelError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TEEG1";

pub fn write_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + store.num_values() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], KernelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            KernelError::Checkpoint(format!("truncated {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ParamStore, KernelError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(KernelError::Checkpoint("unknown magic".into()));
    }
    let mut cur = Cursor { buf: bytes, pos: 5 };
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let n = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(n, "name")?)
            .map_err(|_| KernelError::Checkpoint(format!("non-UTF-8 name at byte {}", cur.pos)))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take(4, "dim")?.try_into().unwrap()) as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| KernelError::Checkpoint(format!("oversized tensor `{name}`")))?;
        let payload = cur.take(count, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| KernelError::Checkpoint(format!("`{name}`: {e}")))?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<(), KernelError> {
    fs::write(path, write_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, KernelError> {
    read_checkpoint(&fs::read(path)?)
}
