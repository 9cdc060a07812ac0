use super::{ImageSet, RawDataset};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Keeps labels `0..num_classes` and draws, per class, `train_per_class`
/// training and `test_per_class` disjoint test images. Each class shuffles
/// with its own substream `class/{c}`. Output is grouped by class.
pub fn select_classes(
    ds: &RawDataset,
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    rng: &SeededRng,
) -> Result<(RawDataset, RawDataset)> {
    let mut train_idx = Vec::with_capacity(num_classes * train_per_class);
    let mut test_idx = Vec::with_capacity(num_classes * test_per_class);
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] as usize == c).collect();
        let need = train_per_class + test_per_class;
        if members.len() < need {
            return Err(Error::Data(format!(
                "class {c} has {} images, {need} needed",
                members.len()
            )));
        }
        rng.split(&format!("class/{c}")).shuffle(&mut members);
        train_idx.extend_from_slice(&members[..train_per_class]);
        test_idx.extend_from_slice(&members[train_per_class..need]);
    }
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

/// Adds `N(0, σ²)` to every pixel, optionally clamping to `[0, 1]`.
pub fn add_gaussian_noise(set: &ImageSet, sigma: f64, clamp: bool, rng: &mut SeededRng) -> Result<ImageSet> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Validation(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    let mut out = set.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for p in out.pixels.iter_mut() {
        let v = *p + sigma * rng.normal();
        *p = if clamp { v.clamp(0.0, 1.0) } else { v };
    }
    Ok(out)
}
