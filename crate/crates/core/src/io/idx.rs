//! IDX files as used by MNIST-style datasets: a big-endian header
//! `[0, 0, type, ndim]` followed by `ndim` big-endian u32 dimensions and the
//! raw unsigned bytes.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated header: missing {what}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{what}: magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], start: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        msg: format!("{what}: truncated, expected {len} data bytes after offset {start}"),
    })
}

/// Parses in-memory image and label files. Pixels are scaled to `[0, 1]`;
/// the class count is one more than the largest label.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    check_magic(images, IMAGES_MAGIC, "images")?;
    let count = read_u32(images, 4, "image count")? as usize;
    let rows = read_u32(images, 8, "row count")? as usize;
    let cols = read_u32(images, 12, "column count")? as usize;
    check_magic(labels, LABELS_MAGIC, "labels")?;
    let label_count = read_u32(labels, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{count} images but {label_count} labels"),
        });
    }
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::Format {
            offset: 8,
            msg: "image dimensions must be positive".into(),
        });
    }
    let pixels = body(images, 16, count * dim, "images")?;
    let label_bytes = body(labels, 8, count, "labels")?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(features, labels, dim, classes)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx(&std::fs::read(images)?, &std::fs::read(labels)?)
}
