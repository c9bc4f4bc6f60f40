//! Binary tensor record (`PHXT`).
//!
//! Layout: magic `PHXT`, u16 version = 1, u8 dtype = 0 (f32), u8 rank,
//! `rank` little-endian u64 dims, then the row-major little-endian f32
//! payload. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"PHXT";
pub const TENSOR_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&[DTYPE_F32, tensor.rank() as u8])?;
    for &d in tensor.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)
}

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * tensor.rank() + 4 * tensor.numel());
    write_tensor(&mut buf, tensor).expect("writing to a Vec cannot fail");
    buf
}

/// Byte cursor that tracks its offset for error reporting.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor {
            bytes,
            pos: 0,
            base: 0,
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.offset(),
                detail: format!("truncated {what}: need {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub(crate) fn read_tensor_record(cur: &mut Cursor<'_>) -> Result<Tensor> {
    let start = cur.offset();
    let magic = cur.take(4, "tensor magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format {
            offset: start,
            detail: format!("bad tensor magic {magic:?}"),
        });
    }
    let version = cur.u16("tensor version")?;
    if version != TENSOR_VERSION {
        return Err(Error::Format {
            offset: start + 4,
            detail: format!("unsupported tensor version {version}"),
        });
    }
    let dtype = cur.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            offset: start + 6,
            detail: format!("unsupported dtype {dtype}"),
        });
    }
    let rank = cur.u8("rank")? as usize;
    if rank == 0 {
        return Err(Error::Format {
            offset: start + 7,
            detail: "rank 0 tensor".into(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = cur.offset();
        let d = cur.u64("dimension")?;
        if d == 0 || d > u32::MAX as u64 {
            return Err(Error::Format {
                offset: at,
                detail: format!("invalid dimension {d}"),
            });
        }
        shape.push(d as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            offset: start,
            detail: "tensor size overflows".into(),
        })?;
    let payload = cur.take(numel * 4, "tensor payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor::new(bytes);
    let t = read_tensor_record(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format {
            offset: cur.offset(),
            detail: "trailing bytes after tensor".into(),
        });
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(tensor)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
