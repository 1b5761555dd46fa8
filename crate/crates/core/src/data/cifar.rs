//! CIFAR-10 binary batches: one label byte then 3072 channel-planar bytes.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const BATCH_RECORDS: usize = 10_000;

fn append_batch(
    bytes: &[u8],
    source_name: &str,
    images: &mut Vec<u8>,
    labels: &mut Vec<u8>,
) -> Result<()> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Truncated {
            source_name: source_name.into(),
            expected: bytes.len().div_ceil(RECORD_BYTES).max(1) * RECORD_BYTES,
            actual: bytes.len(),
            offset: bytes.len() - bytes.len() % RECORD_BYTES,
        });
    }
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::parse(
                source_name,
                format!("record {i} has label {} >= 10", rec[0]),
            ));
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Parses in-memory batch files in order.
pub fn parse_cifar10_bytes(batches: &[(&str, &[u8])], name: &str) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (src, bytes) in batches {
        append_batch(bytes, src, &mut images, &mut labels)?;
    }
    Dataset::new(name, images, labels, [3, 32, 32], 10)
}

pub fn parse_cifar10_binary<P: AsRef<Path>>(paths: &[P], name: &str) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        append_batch(&bytes, &p.display().to_string(), &mut images, &mut labels)?;
    }
    Dataset::new(name, images, labels, [3, 32, 32], 10)
}
