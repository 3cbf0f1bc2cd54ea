//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "LPTH"
//! version u32
//! count   u32                       number of blocks
//! block*  name_len u32, name (UTF-8), rank u32, extents u64 * rank,
//!         data f64 * prod(extents)
//! ```

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_u32, read_u64, write_atomic, ByteReader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LPTH";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A named parameter tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_checkpoint(blocks: &[ParamBlock]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for block in blocks {
        out.extend_from_slice(&(block.name.len() as u32).to_le_bytes());
        out.extend_from_slice(block.name.as_bytes());
        out.extend_from_slice(&(block.shape.len() as u32).to_le_bytes());
        for &e in &block.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in &block.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, blocks: &[ParamBlock]) -> Result<()> {
    write_atomic(path, |w| w.write_all(&encode_checkpoint(blocks)))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<ParamBlock>> {
    let bad = |m: &str| Error::format(path, m);
    let mut r = ByteReader::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a parameter checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
    let mut blocks = Vec::with_capacity(count as usize);
    for b in 0..count {
        let truncated = |_| bad(&format!("block {b} is truncated"));
        let name_len = read_u32(&mut r).map_err(truncated)? as usize;
        let name = r.take_slice(name_len).map_err(truncated)?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| bad(&format!("block {b} name is not UTF-8")))?;
        let rank = read_u32(&mut r).map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).map_err(truncated)? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r
            .take_slice(len.checked_mul(8).ok_or_else(|| bad("block too large"))?)
            .map_err(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        blocks.push(ParamBlock { name, shape, data });
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes after last block"));
    }
    Ok(blocks)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<ParamBlock>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes, path)
}
