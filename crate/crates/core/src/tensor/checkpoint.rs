//! Flat binary checkpoint layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "SVCK" | version | count
//! count x ( name_len | name bytes (UTF-8) | rank | dims[rank] | f32 LE values )
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl CheckpointEntry {
    pub fn scalar(name: &str, value: f32) -> Self {
        Self { name: name.into(), shape: alloc::vec![1], values: alloc::vec![value] }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let Ok(v) = u32::try_from(v) else {
        bail!(Format, "value {v} does not fit the 32-bit header field");
    };
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(entries: &[CheckpointEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
    put_u32(&mut out, entries.len())?;
    for e in entries {
        if e.shape.iter().product::<usize>() != e.values.len() {
            bail!(Format, "{}: shape {:?} does not hold {} values", e.name, e.shape, e.values.len());
        }
        put_u32(&mut out, e.name.len())?;
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.shape.len())?;
        for &d in &e.shape {
            put_u32(&mut out, d)?;
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let Some(end) = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) else {
            bail!(Format, "truncated checkpoint at byte {}", self.pos);
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        bail!(Format, "bad checkpoint magic");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let Ok(name) = core::str::from_utf8(r.take(len)?) else {
            bail!(Format, "parameter name is not UTF-8");
        };
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let Some(n) = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)) else {
            bail!(Format, "{name}: shape overflows");
        };
        let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push(CheckpointEntry { name: name.into(), shape, values });
    }
    if r.pos != bytes.len() {
        bail!(Format, "{} trailing bytes after checkpoint", bytes.len() - r.pos);
    }
    Ok(entries)
}
