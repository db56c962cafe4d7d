//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | 4         | magic `b"DKTN"`               |
//! | 4      | 1         | version, `1`                  |
//! | 5      | 1         | dtype, `0` = f32              |
//! | 6      | 1         | ndim, `>= 1`                  |
//! | 7      | 1         | reserved, `0`                 |
//! | 8      | 4 * ndim  | u32 extents                   |
//! | ...    | 4 * numel | row-major f32 payload         |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"DKTN";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER: usize = 8;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, t.ndim() as u8, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one container from the front of `bytes`, returning the tensor and
/// the number of bytes consumed. `base` is added to reported error offsets.
pub fn decode_at(bytes: &[u8], base: u64) -> Result<(Tensor<f32>, usize)> {
    let err = |off: usize, msg: &str| Error::format(base + off as u64, msg);
    if bytes.len() < HEADER {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(err(0, "bad magic or truncated header"));
        }
        return Err(err(bytes.len(), "truncated header"));
    }
    if bytes[..4] != MAGIC {
        return Err(err(0, "bad magic, expected DKTN"));
    }
    if bytes[4] != VERSION {
        return Err(err(4, &format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(err(5, &format!("unsupported dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(err(6, "empty shape (ndim = 0)"));
    }
    if bytes[7] != 0 {
        return Err(err(7, "reserved byte must be zero"));
    }
    let dims_end = HEADER + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(err(bytes.len(), "truncated shape"));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for i in 0..ndim {
        let off = HEADER + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(err(off, "zero extent"));
        }
        numel = numel
            .checked_mul(d)
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| err(off, "element count overflows"))?;
        shape.push(d);
    }
    let payload = numel * 4;
    let available = bytes.len() - dims_end;
    if available < payload {
        return Err(err(
            bytes.len(),
            &format!("truncated payload: need {payload} bytes, have {available}"),
        ));
    }
    let data: Vec<f32> = bytes[dims_end..dims_end + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((Tensor::new(&shape, data)?, dims_end + payload))
}

/// Decodes a buffer holding exactly one container.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (t, used) = decode_at(bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(used as u64, "trailing bytes after payload"));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
