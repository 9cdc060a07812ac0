//! Per-region principal component projection.
//!
//! The image is cut into a `g × g` grid of equal regions (1, 4 or 16
//! tokens); each region gets its own mean and components, fitted on the
//! training split only.

use serde::{Deserialize, Serialize};

use super::ImageSet;
use crate::error::{Error, Result};
use crate::numerics::{eigh_symmetric, RealTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenScheme {
    grid: usize,
}

impl TokenScheme {
    /// `tokens` must be 1, 4 or 16.
    pub fn from_tokens(tokens: usize) -> Result<Self> {
        let grid = match tokens {
            1 => 1,
            4 => 2,
            16 => 4,
            other => {
                return Err(Error::Config(format!(
                    "token count must be 1, 4 or 16, got {other}"
                )))
            }
        };
        Ok(Self { grid })
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    fn check_geometry(&self, height: usize, width: usize) -> Result<()> {
        if !height.is_multiple_of(self.grid) || !width.is_multiple_of(self.grid) {
            return Err(Error::Validation(format!(
                "{height}x{width} images do not split into a {0}x{0} grid",
                self.grid
            )));
        }
        Ok(())
    }

    /// Pixels of region `r` (row-major over the grid), row-major inside
    /// the region with channels interleaved.
    fn region(&self, image: &[f64], height: usize, width: usize, channels: usize, r: usize) -> Vec<f64> {
        let (rh, rw) = (height / self.grid, width / self.grid);
        let (gr, gc) = (r / self.grid, r % self.grid);
        let mut out = Vec::with_capacity(rh * rw * channels);
        for y in gr * rh..(gr + 1) * rh {
            let start = (y * width + gc * rw) * channels;
            out.extend_from_slice(&image[start..start + rw * channels]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPca {
    pub mean: Vec<f64>,
    /// `pixels × out_dim`, orthonormal columns in descending eigenvalue order.
    pub components: RealTensor,
    /// Eigenvalues of the kept components, descending.
    pub eigenvalues: Vec<f64>,
    /// Trace of the region covariance.
    pub total_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub scheme: TokenScheme,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub out_dim: usize,
    pub regions: Vec<RegionPca>,
}

impl PcaModel {
    /// FNV-1a over every stored number, for cheap identity checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for r in &self.regions {
            r.mean.iter().for_each(|&v| eat(v));
            r.components.data().iter().for_each(|&v| eat(v));
        }
        h
    }
}

/// Fits one PCA per token region on `train` (pixels already on `[0, 1]`).
pub fn pca_fit(train: &ImageSet, scheme: TokenScheme, out_dim: usize) -> Result<PcaModel> {
    scheme.check_geometry(train.height, train.width)?;
    let pixels = train.pixels_per_image() / scheme.tokens();
    if out_dim == 0 || out_dim > pixels {
        return Err(Error::Validation(format!(
            "output dimension {out_dim} must be between 1 and the region size {pixels}"
        )));
    }
    let n = train.len();
    if n < out_dim + 1 {
        return Err(Error::Data(format!(
            "PCA to {out_dim} dimensions needs at least {} training images, got {n}",
            out_dim + 1
        )));
    }
    let mut regions = Vec::with_capacity(scheme.tokens());
    for r in 0..scheme.tokens() {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| scheme.region(train.image(i), train.height, train.width, train.channels, r))
            .collect();
        regions.push(fit_region(&rows, out_dim)?);
    }
    Ok(PcaModel {
        scheme,
        height: train.height,
        width: train.width,
        channels: train.channels,
        out_dim,
        regions,
    })
}

fn fit_region(rows: &[Vec<f64>], out_dim: usize) -> Result<RegionPca> {
    let (n, p) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..p)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let denom = (n - 1) as f64;
    let total_variance = centred.iter().flatten().map(|v| v * v).sum::<f64>() / denom;

    let (mut components, eigenvalues) = if n - 1 < p && out_dim < n - 1 {
        dual_components(&centred, out_dim, denom)?
    } else {
        primal_components(&centred, out_dim, denom)?
    };
    for c in 0..out_dim {
        let col: Vec<f64> = (0..p).map(|k| components.get(k, c)).collect();
        let lead = col
            .iter()
            .enumerate()
            .fold(0, |best, (k, v)| if v.abs() > col[best].abs() { k } else { best });
        if col[lead] < 0.0 {
            for k in 0..p {
                components.set(k, c, -col[k]);
            }
        }
    }
    Ok(RegionPca {
        mean,
        components,
        eigenvalues,
        total_variance,
    })
}

/// Eigenvectors of the `p × p` covariance.
fn primal_components(centred: &[Vec<f64>], out_dim: usize, denom: f64) -> Result<(RealTensor, Vec<f64>)> {
    let p = centred[0].len();
    let mut cov = RealTensor::zeros(&[p, p]);
    for a in 0..p {
        for b in a..p {
            let v = centred.iter().map(|r| r[a] * r[b]).sum::<f64>() / denom;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    let eig = eigh_symmetric(&cov)?;
    let mut comps = RealTensor::zeros(&[p, out_dim]);
    let mut values = Vec::with_capacity(out_dim);
    for c in 0..out_dim {
        let src = p - 1 - c;
        values.push(eig.values[src]);
        for k in 0..p {
            comps.set(k, c, eig.vectors.get(k, src));
        }
    }
    Ok((comps, values))
}

/// Same components through the `n × n` Gram matrix, for regions with more
/// pixels than samples: `v = Xcᵀu / ‖Xcᵀu‖`.
fn dual_components(centred: &[Vec<f64>], out_dim: usize, denom: f64) -> Result<(RealTensor, Vec<f64>)> {
    let (n, p) = (centred.len(), centred[0].len());
    let mut gram = RealTensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let v = centred[i]
                .iter()
                .zip(&centred[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / denom;
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }
    let eig = eigh_symmetric(&gram)?;
    let largest = eig.values[n - 1].max(0.0);
    let mut comps = RealTensor::zeros(&[p, out_dim]);
    let mut values = Vec::with_capacity(out_dim);
    for c in 0..out_dim {
        let src = n - 1 - c;
        let lambda = eig.values[src];
        if lambda <= 1e-12 * largest {
            // rank-deficient: the Gram route cannot produce this direction
            return primal_components(centred, out_dim, denom);
        }
        values.push(lambda);
        let mut v = vec![0.0; p];
        for (i, row) in centred.iter().enumerate() {
            let u = eig.vectors.get(i, src);
            for k in 0..p {
                v[k] += row[k] * u;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..p {
            comps.set(k, c, v[k] / norm);
        }
    }
    Ok((comps, values))
}

/// Projects every image to `tokens × out_dim`.
pub fn pca_transform(model: &PcaModel, set: &ImageSet) -> Result<Vec<RealTensor>> {
    if (set.height, set.width, set.channels) != (model.height, model.width, model.channels) {
        return Err(Error::Shape(format!(
            "PCA fitted on {}x{}x{} images, got {}x{}x{}",
            model.height, model.width, model.channels, set.height, set.width, set.channels
        )));
    }
    let t = model.scheme.tokens();
    (0..set.len())
        .map(|i| {
            let mut out = RealTensor::zeros(&[t, model.out_dim]);
            for (r, region) in model.regions.iter().enumerate() {
                let px = model
                    .scheme
                    .region(set.image(i), set.height, set.width, set.channels, r);
                for c in 0..model.out_dim {
                    let v: f64 = px
                        .iter()
                        .zip(&region.mean)
                        .enumerate()
                        .map(|(k, (x, m))| (x - m) * region.components.get(k, c))
                        .sum();
                    out.set(r, c, v);
                }
            }
            Ok(out)
        })
        .collect()
}
