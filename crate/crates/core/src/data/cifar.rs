//! CIFAR-10 binary batches: 3073-byte records, one label byte then
//! 1024 red, 1024 green and 1024 blue bytes.

use std::path::Path;

use super::RawDataset;
use crate::error::{Error, Result};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const RECORD: usize = 1 + 3 * PLANE;

/// Parses one batch; pixels become channel-interleaved.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<RawDataset> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % RECORD) as u64,
            message: format!("size {} is not a multiple of {RECORD}", bytes.len()),
        });
    }
    let count = bytes.len() / RECORD;
    let mut images = Vec::with_capacity(count * 3 * PLANE);
    let mut labels = Vec::with_capacity(count);
    for (r, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (r * RECORD) as u64,
                message: format!("label {} out of range", rec[0]),
            });
        }
        labels.push(rec[0]);
        let planes = &rec[1..];
        for p in 0..PLANE {
            images.extend_from_slice(&[planes[p], planes[PLANE + p], planes[2 * PLANE + p]]);
        }
    }
    RawDataset::new(SIDE, SIDE, 3, images, labels)
}

pub fn load_cifar10_file(path: impl AsRef<Path>) -> Result<RawDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes, path)
}

/// Reads `data_batch_1.bin` … `data_batch_5.bin` and `test_batch.bin`
/// from `dir`, whichever exist, concatenated in that order.
pub fn load_cifar10_bin(dir: impl AsRef<Path>) -> Result<RawDataset> {
    let dir = dir.as_ref();
    let names = (1..=5)
        .map(|i| format!("data_batch_{i}.bin"))
        .chain(std::iter::once("test_batch.bin".to_string()));
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        let batch = load_cifar10_file(&path)?;
        images.extend(batch.images);
        labels.extend(batch.labels);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!(
            "no CIFAR-10 batch files in {}",
            dir.display()
        )));
    }
    RawDataset::new(SIDE, SIDE, 3, images, labels)
}
