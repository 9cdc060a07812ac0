//! Dataset ingestion and preprocessing: IDX and CIFAR-10 binary readers,
//! per-class subsetting, pixel noise, and per-region PCA tokenization.

mod cifar;
mod idx;
mod pca;
mod select;

pub use cifar::{load_cifar10_bin, load_cifar10_file, parse_cifar10};
pub use idx::{encode_idx, load_idx, parse_idx, write_idx, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use pca::{pca_fit, pca_transform, PcaModel, RegionPca, TokenScheme};
pub use select::{add_gaussian_noise, select_classes};

use crate::error::{Error, Result};

/// 8-bit images stored `count × height × width × channels`, channels
/// interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel bytes do not hold {} images of {height}x{width}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.pixels_per_image();
        &self.images[i * per..(i + 1) * per]
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_unit(&self) -> ImageSet {
        ImageSet {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.images.iter().map(|&p| p as f64 / 255.0).collect(),
            labels: self.labels.iter().map(|&l| l as usize).collect(),
        }
    }

    /// Subset by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> RawDataset {
        let mut images = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        RawDataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Images on the `[0, 1]` scale, same layout as [`RawDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.pixels_per_image();
        &self.pixels[i * per..(i + 1) * per]
    }
}
