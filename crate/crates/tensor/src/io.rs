//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "TNSR" | version: u32 | dtype: u32 | rank: u32 | dims: u64 * rank | payload
//! ```
//!
//! dtype `0` stores `f64` values, dtype `1` stores `i32` values. Values are
//! stored bit-for-bit, so a decode/encode cycle reproduces the input bytes.

use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{IntTensor, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 0;
pub const DTYPE_I32: u32 = 1;
pub const MAX_RANK: usize = 8;

/// Decoded contents of a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Tensor),
    I32(IntTensor),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F64(t) => t.shape(),
            TensorData::I32(t) => t.shape(),
        }
    }

    pub fn into_f64(self) -> Result<Tensor> {
        match self {
            TensorData::F64(t) => Ok(t),
            TensorData::I32(_) => Err(TensorError::Format("expected f64 payload, found i32".into())),
        }
    }

    pub fn into_i32(self) -> Result<IntTensor> {
        match self {
            TensorData::I32(t) => Ok(t),
            TensorData::F64(_) => Err(TensorError::Format("expected i32 payload, found f64".into())),
        }
    }
}

fn header(dtype: u32, shape: &[usize], payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * shape.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    out
}

pub fn encode_f64(t: &Tensor) -> Vec<u8> {
    let mut out = header(DTYPE_F64, t.shape(), 8 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out
}

pub fn encode_i32(t: &IntTensor) -> Vec<u8> {
    let mut out = header(DTYPE_I32, t.shape(), 4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode(t: &TensorData) -> Vec<u8> {
    match t {
        TensorData::F64(t) => encode_f64(t),
        TensorData::I32(t) => encode_i32(t),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let Some(end) = end else {
            return Err(TensorError::Format(format!("truncated while reading {what}")));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a tensor file; any malformed input yields [`TensorError::Format`].
pub fn decode(bytes: &[u8]) -> Result<TensorData> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(TensorError::Format("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Format(format!("unsupported format version {version}")));
    }
    let dtype = r.u32("dtype")?;
    let elem = match dtype {
        DTYPE_F64 => 8,
        DTYPE_I32 => 4,
        other => return Err(TensorError::Format(format!("unknown dtype code {other}"))),
    };
    let rank = r.u32("rank")? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(TensorError::Format(format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = r.u64("dims")?;
        let d = usize::try_from(d).ok().filter(|d| *d > 0);
        let Some(d) = d else {
            return Err(TensorError::Format("dimension must be positive".into()));
        };
        count = count
            .checked_mul(d)
            .ok_or_else(|| TensorError::Format("element count overflows".into()))?;
        shape.push(d);
    }
    let payload_len = count
        .checked_mul(elem)
        .ok_or_else(|| TensorError::Format("payload size overflows".into()))?;
    if bytes.len() - r.pos != payload_len {
        return Err(TensorError::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {payload_len}",
            bytes.len() - r.pos
        )));
    }
    let payload = r.take(payload_len, "payload")?;
    let data = match dtype {
        DTYPE_F64 => TensorData::F64(Tensor::new(
            shape,
            payload.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect(),
        )?),
        _ => TensorData::I32(IntTensor::new(
            shape,
            payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
        )?),
    };
    Ok(data)
}

pub fn write_file(path: impl AsRef<Path>, t: &TensorData) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn write_f64(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_f64(t))?;
    Ok(())
}

pub fn write_i32(path: impl AsRef<Path>, t: &IntTensor) -> Result<()> {
    std::fs::write(path, encode_i32(t))?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<TensorData> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let b = encode_f64(&t);
        assert_eq!(&b[..4], b"TNSR");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        assert_eq!(b.len(), 24 + 16);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"").is_err());
        assert!(decode(b"TNSX\x01\0\0\0").is_err());
        let mut b = encode_i32(&IntTensor::new(vec![3], vec![1, 2, 3]).unwrap());
        b.push(0);
        assert!(decode(&b).is_err());
        b.truncate(b.len() - 2);
        assert!(decode(&b).is_err());
    }

    #[test]
    fn rejects_huge_dims_without_allocating() {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&b), Err(TensorError::Format(_))));
    }
}
