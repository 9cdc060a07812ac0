//! Big-endian IDX containers (the MNIST family).

use std::path::Path;

use super::RawDataset;
use crate::error::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: format!("truncated header: file has {} bytes", bytes.len()),
        })
}

fn format_err(path: &Path, offset: usize, message: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    }
}

/// Parses an image file and a label file already in memory. The paths
/// only label errors.
pub fn parse_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let magic = read_u32(images, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(format_err(
            images_path,
            0,
            format!("bad image magic {magic:#010x}"),
        ));
    }
    let count = read_u32(images, 4, images_path)? as usize;
    let rows = read_u32(images, 8, images_path)? as usize;
    let cols = read_u32(images, 12, images_path)? as usize;
    let need = 16 + count * rows * cols;
    if images.len() < need {
        return Err(format_err(
            images_path,
            images.len(),
            format!("truncated pixel data: expected {need} bytes"),
        ));
    }
    if images.len() > need {
        return Err(format_err(
            images_path,
            need,
            "trailing bytes after pixel data".into(),
        ));
    }

    let magic = read_u32(labels, 0, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(format_err(
            labels_path,
            0,
            format!("bad label magic {magic:#010x}"),
        ));
    }
    let label_count = read_u32(labels, 4, labels_path)? as usize;
    if label_count != count {
        return Err(format_err(
            labels_path,
            4,
            format!("label count {label_count} does not match image count {count}"),
        ));
    }
    if labels.len() != 8 + count {
        return Err(format_err(
            labels_path,
            labels.len().min(8 + count),
            format!("expected {} bytes, file has {}", 8 + count, labels.len()),
        ));
    }
    RawDataset::new(rows, cols, 1, images[16..].to_vec(), labels[8..].to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx(&images, &labels, ip, lp)
}

/// IDX bytes `(images, labels)` for a single-channel dataset.
pub fn encode_idx(ds: &RawDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.channels != 1 {
        return Err(Error::Unsupported(format!(
            "IDX images are single-channel, dataset has {}",
            ds.channels
        )));
    }
    let mut images = Vec::with_capacity(16 + ds.images.len());
    for v in [
        IDX_IMAGE_MAGIC,
        ds.len() as u32,
        ds.height as u32,
        ds.width as u32,
    ] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&ds.images);
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend_from_slice(&ds.labels);
    Ok((images, labels))
}

pub fn write_idx(
    ds: &RawDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, images).map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, labels).map_err(|e| Error::io(lp, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RawDataset {
        RawDataset::new(2, 3, 1, (0..12).collect(), vec![4, 9]).unwrap()
    }

    fn parse(images: &[u8], labels: &[u8]) -> Result<RawDataset> {
        parse_idx(images, labels, Path::new("img"), Path::new("lbl"))
    }

    #[test]
    fn round_trip() {
        let ds = tiny();
        let (img, lbl) = encode_idx(&ds).unwrap();
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        assert_eq!(&lbl[..4], &[0, 0, 8, 1]);
        let back = parse(&img, &lbl).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_idx(&back).unwrap(), (img, lbl));
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let (mut img, lbl) = encode_idx(&tiny()).unwrap();
        img[3] = 0x01;
        match parse(&img, &lbl) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_files() {
        let (img, lbl) = encode_idx(&tiny()).unwrap();
        match parse(&img[..20], &lbl) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        match parse(&img[..10], &lbl) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse(&img, &lbl[..9]), Err(Error::Format { .. })));
    }

    #[test]
    fn mismatched_counts() {
        let (img, mut lbl) = encode_idx(&tiny()).unwrap();
        lbl[7] = 3;
        lbl.push(0);
        match parse(&img, &lbl) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, 4);
                assert!(message.contains("does not match"));
            }
            other => panic!("{other:?}"),
        }
    }
}
