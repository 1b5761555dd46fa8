//! `IBDS` raw container for externally converted datasets.
//!
//! Layout, little-endian: `"IBDS"`, version `u32`, n `u32`, channels `u8`,
//! height `u16`, width `u16`, classes `u8`, then `n*ch*H*W` image bytes
//! (channel-planar per sample) and `n` label bytes.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IBDS";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 + 4 + 1 + 2 + 2 + 1;

pub fn write_container_bytes(ds: &Dataset) -> Vec<u8> {
    let [ch, h, w] = ds.dims();
    let mut out = Vec::with_capacity(HEADER_BYTES + ds.images.len() + ds.labels.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.push(ch as u8);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push(ds.num_classes as u8);
    out.extend_from_slice(&ds.images);
    out.extend_from_slice(&ds.labels);
    out
}

pub fn parse_container_bytes(bytes: &[u8], source_name: &str, name: &str) -> Result<Dataset> {
    let short = |expected: usize| Error::Truncated {
        source_name: source_name.into(),
        expected,
        actual: bytes.len(),
        offset: bytes.len(),
    };
    if bytes.len() < HEADER_BYTES {
        return Err(short(HEADER_BYTES));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::parse(source_name, "bad magic, expected IBDS"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::parse(
            source_name,
            format!("unsupported version {version}"),
        ));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let ch = bytes[12] as usize;
    let h = u16::from_le_bytes([bytes[13], bytes[14]]) as usize;
    let w = u16::from_le_bytes([bytes[15], bytes[16]]) as usize;
    let classes = bytes[17] as usize;
    let image_bytes = n * ch * h * w;
    let expected = HEADER_BYTES + image_bytes + n;
    if bytes.len() != expected {
        return Err(short(expected));
    }
    let images = bytes[HEADER_BYTES..HEADER_BYTES + image_bytes].to_vec();
    let labels = bytes[HEADER_BYTES + image_bytes..].to_vec();
    Dataset::new(name, images, labels, [ch, h, w], classes)
}

pub fn read_container(path: &Path, name: &str) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_container_bytes(&bytes, &path.display().to_string(), name)
}

pub fn write_container(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, write_container_bytes(ds)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = b"IBDS".to_vec();
        b.extend(1u32.to_le_bytes());
        b.extend(2u32.to_le_bytes());
        b.push(1);
        b.extend(2u16.to_le_bytes());
        b.extend(2u16.to_le_bytes());
        b.push(2);
        b.extend([0, 64, 128, 255, 1, 2, 3, 4]);
        b.extend([0, 1]);
        b
    }

    #[test]
    fn parses_fixture_and_round_trips() {
        let ds = parse_container_bytes(&fixture(), "fixture", "tiny").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dims(), [1, 2, 2]);
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.image(1), &[1, 2, 3, 4]);
        assert_eq!(write_container_bytes(&ds), fixture());
    }

    #[test]
    fn short_payload_names_offset() {
        let mut b = fixture();
        b.pop();
        let err = parse_container_bytes(&b, "fixture", "tiny").unwrap_err();
        match &err {
            Error::Truncated {
                expected,
                actual,
                offset,
                ..
            } => {
                assert_eq!((*expected, *actual, *offset), (28, 27, 27));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("offset 27"));
    }

    #[test]
    fn rejects_magic_version_and_labels() {
        let mut b = fixture();
        b[0] = b'X';
        assert!(parse_container_bytes(&b, "f", "t").is_err());
        let mut b = fixture();
        b[4] = 9;
        assert!(parse_container_bytes(&b, "f", "t").is_err());
        let mut b = fixture();
        *b.last_mut().unwrap() = 2;
        assert!(parse_container_bytes(&b, "f", "t").is_err());
    }
}
