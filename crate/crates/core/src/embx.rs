//! EMBX: a minimal little-endian binary matrix container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EMBX"
//! 4       4     version (u32) = 1
//! 8       4     rows (u32)
//! 12      4     cols (u32)
//! 16      1     dtype: 0 = f32, 1 = f64
//! 17      …     rows·cols scalars, row-major
//! ```
//!
//! No trailing bytes are allowed.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"EMBX";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            found => Err(Error::BadDtype { found }),
        }
    }
}

/// A decoded file: the matrix plus the dtype it was stored with.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbxFile {
    pub matrix: Matrix,
    pub dtype: Dtype,
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn read_embx(bytes: &[u8]) -> Result<EmbxFile> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload { expected: HEADER_LEN, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload { expected: HEADER_LEN, got: bytes.len() });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::BadVersion { found: version });
    }
    let rows = u32_at(bytes, 8) as usize;
    let cols = u32_at(bytes, 12) as usize;
    let dtype = Dtype::from_byte(bytes[16])?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or_else(|| Error::ShapeMismatch(format!("{rows}x{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, got: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes { extra: payload.len() - expected });
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(EmbxFile { matrix: Matrix::new(rows, cols, data)?, dtype })
}

/// Encodes `m`; with `Dtype::F32` each value is rounded to the nearest `f32`.
pub fn write_embx(m: &Matrix, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.rows() * m.cols() * dtype.width());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.push(dtype as u8);
    for &v in m.as_slice() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn load(path: impl AsRef<Path>) -> Result<EmbxFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_embx(&bytes)
}

pub fn save(path: impl AsRef<Path>, m: &Matrix, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_embx(m, dtype)).map_err(|e| Error::io(path, e))
}
