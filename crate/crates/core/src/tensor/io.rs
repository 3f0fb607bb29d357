//! Binary tensor files.
//!
//! Layout: the four bytes `MSCA`, a `u8` version (1), a `u8` rank, `rank`
//! little-endian `u64` extents, then the row-major `f64` payload, also
//! little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSCA";
pub const VERSION: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one tensor. Format errors report the byte offset where decoding
/// failed.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Format {
        offset: 0,
        detail: e.to_string(),
    })?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = cur.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let rank = cur.take(1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = cur.pos;
        let e = u64::from_le_bytes(cur.take(8, "extent")?.try_into().unwrap());
        if e == 0 {
            return Err(Error::Format {
                offset: at,
                detail: "zero extent".into(),
            });
        }
        shape.push(e as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format {
            offset: cur.pos,
            detail: format!("element count overflow for {shape:?}"),
        })?;
    let want = n.checked_mul(8).ok_or_else(|| Error::Format {
        offset: cur.pos,
        detail: "payload size overflow".into(),
    })?;
    let payload = cur.take(want, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            detail: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Tensor::new(shape, data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!(
                    "truncated {what}: need {n} bytes, have {}",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
