//! Self-describing binary checkpoint.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | field                                           |
//! |--------|------|-------------------------------------------------|
//! | 0      | 8    | magic `SGCKPT01`                                |
//! | 8      | 4    | `u32` metadata length `M`                       |
//! | 12     | M    | UTF-8 JSON metadata (model kind, specs, config) |
//! | 12+M   | 4    | `u32` tensor count `N`                          |
//! |        |      | N records: `u32` name length `L`, `L` bytes of  |
//! |        |      | UTF-8 name, `u64` rows, `u64` cols, then        |
//! |        |      | `rows·cols` `f64` values in row-major order     |
//! | end-32 | 32   | SHA-256 of every preceding byte                 |

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::tape::ParamSet;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGCKPT01";

pub fn encode_checkpoint<M: Serialize>(meta: &M, params: &ParamSet) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(64 + meta.len() + params.num_scalars() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, ParamSet)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let mlen = r.u32()? as usize;
    let meta = serde_json::from_slice(r.take(mlen)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .to_owned();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(name, Tensor2::from_vec(rows, cols, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((meta, params))
}

pub fn save_checkpoint<M: Serialize>(path: &Path, meta: &M, params: &ParamSet) -> Result<()> {
    let bytes = encode_checkpoint(meta, params)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<M: DeserializeOwned>(path: &Path) -> Result<(M, ParamSet)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
