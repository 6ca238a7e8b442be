//! Raw row-major matrix files.
//!
//! Layout: a 16-byte header `{magic: [u8; 4], rows: u32, cols: u32, reserved: u32}`
//! followed by `rows * cols` little-endian values. `BRF1` marks float32
//! payloads (datasets, exported parameters); `BRD1` marks float64 payloads
//! (exact training state). `reserved` is a format version and must be 0.

use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub const MAGIC_F32: [u8; 4] = *b"BRF1";
pub const MAGIC_F64: [u8; 4] = *b"BRD1";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub magic: [u8; 4],
    pub rows: u32,
    pub cols: u32,
}

impl Header {
    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&self.magic);
        out[4..8].copy_from_slice(&self.rows.to_le_bytes());
        out[8..12].copy_from_slice(&self.cols.to_le_bytes());
        out
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parses and validates the header, returning it with the payload slice.
pub fn read_header(bytes: &[u8], expected_magic: [u8; 4]) -> Result<(Header, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::LengthMismatch {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if magic != expected_magic {
        return Err(Error::BadMagic {
            expected: expected_magic,
            found: magic,
        });
    }
    let version = u32_at(bytes, 12);
    if version != 0 {
        return Err(Error::UnknownVersion(version));
    }
    let header = Header {
        magic,
        rows: u32_at(bytes, 4),
        cols: u32_at(bytes, 8),
    };
    Ok((header, &bytes[HEADER_LEN..]))
}

fn payload_len(header: &Header, width: usize) -> Result<usize> {
    (header.rows as usize)
        .checked_mul(header.cols as usize)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| {
            Error::malformed(
                "matrix header",
                format!("{}x{} overflows", header.rows, header.cols),
            )
        })
}

fn dims(rows: usize, cols: usize) -> Result<(u32, u32)> {
    let r = u32::try_from(rows).map_err(|_| Error::Shape(format!("{rows} rows exceed u32")))?;
    let c = u32::try_from(cols).map_err(|_| Error::Shape(format!("{cols} cols exceed u32")))?;
    Ok((r, c))
}

pub fn encode_f32(matrix: &Array2<f32>) -> Result<Vec<u8>> {
    let (rows, cols) = dims(matrix.nrows(), matrix.ncols())?;
    let header = Header {
        magic: MAGIC_F32,
        rows,
        cols,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.len() * 4);
    out.extend_from_slice(&header.to_bytes());
    for v in matrix.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f32(bytes: &[u8]) -> Result<Array2<f32>> {
    let (header, payload) = read_header(bytes, MAGIC_F32)?;
    let expected = payload_len(&header, 4)?;
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Array2::from_shape_vec((header.rows as usize, header.cols as usize), values)
        .map_err(|e| Error::Shape(e.to_string()))
}

pub fn encode_f64(matrix: &Array2<f64>) -> Result<Vec<u8>> {
    let (rows, cols) = dims(matrix.nrows(), matrix.ncols())?;
    let header = Header {
        magic: MAGIC_F64,
        rows,
        cols,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.len() * 8);
    out.extend_from_slice(&header.to_bytes());
    for v in matrix.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f64(bytes: &[u8]) -> Result<Array2<f64>> {
    let (header, payload) = read_header(bytes, MAGIC_F64)?;
    let expected = payload_len(&header, 8)?;
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((header.rows as usize, header.cols as usize), values)
        .map_err(|e| Error::Shape(e.to_string()))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
