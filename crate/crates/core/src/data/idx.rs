//! IDX files as distributed for MNIST and Fashion-MNIST.

use std::path::Path;

use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;

/// Raw unsigned-byte array with its declared dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx_bytes(bytes: &[u8], source_name: &str) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            source_name: source_name.into(),
            expected: 4,
            actual: bytes.len(),
            offset: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::parse(
            source_name,
            format!(
                "bad magic {:02x}{:02x}{:02x}{:02x}",
                bytes[0], bytes[1], bytes[2], bytes[3]
            ),
        ));
    }
    if bytes[2] != UBYTE {
        return Err(Error::parse(
            source_name,
            format!("unsupported dtype code 0x{:02x}", bytes[2]),
        ));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::parse(source_name, "rank 0"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated {
            source_name: source_name.into(),
            expected: header,
            actual: bytes.len(),
            offset: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = payload
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| Error::parse(source_name, format!("dims {dims:?} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            source_name: source_name.into(),
            expected,
            actual: bytes.len(),
            offset: bytes.len().min(expected),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn parse_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_bytes(&bytes, &path.display().to_string())
}

/// Serializes an unsigned-byte array; used for fixtures and conversions.
pub fn write_idx_bytes(arr: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, arr.dims.len() as u8];
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}
