// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reader for the IDX files that MNIST ships in.

use std::path::Path;

use crate::data::{DataKind, Dataset, Example};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail: "header truncated".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad magic number {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], needed: usize, path: &Path) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            detail: format!("file truncated: {needed} bytes needed, {} present", bytes.len()),
        });
    }
    Ok(())
}

/// Loads an IDX image file and its label file.
///
/// Pixels are scaled to `[0, 1]`; each example's target and tag are the raw
/// digit label. Any format problem fails the whole load.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_file(images)?;
    check_magic(&img, IMAGE_MAGIC, images)?;
    let count = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let width = rows * cols;
    check_len(&img, 16 + count * width, images)?;

    let lab = read_file(labels)?;
    check_magic(&lab, LABEL_MAGIC, labels)?;
    let label_count = be_u32(&lab, 4, labels)? as usize;
    if label_count != count {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            offset: 4,
            detail: format!("{label_count} labels for {count} images"),
        });
    }
    check_len(&lab, 8 + count, labels)?;

    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let label = lab[8 + i];
        if label > 9 {
            return Err(Error::Format {
                path: labels.to_path_buf(),
                offset: (8 + i) as u64,
                detail: format!("label {label} outside 0..=9"),
            });
        }
        let start = 16 + i * width;
        examples.push(Example {
            input: img[start..start + width]
                .iter()
                .map(|&p| p as f64 / 255.0)
                .collect(),
            targets: vec![label as u32],
            weights: vec![1.0],
            tag: label as u32,
        });
    }
    Dataset::new(DataKind::Features { width }, examples)
}

/// Serializes images and labels in IDX layout. Pixels are rounded back to bytes.
pub fn encode_idx(dataset: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for ex in &dataset.examples {
        if ex.input.len() != rows * cols {
            return Err(Error::usage("example width does not match rows * cols"));
        }
        img.extend(ex.input.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        lab.push(ex.tag as u8);
    }
    Ok((img, lab))
}
