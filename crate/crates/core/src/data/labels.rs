use ndarray::Array2;

use crate::error::{Error, Result};

/// Default presence threshold: a class must cover 1% of the image.
pub const DEFAULT_MIN_FRAC: f64 = 0.01;

/// Image-level multi-hot labels for the foreground classes `1..=k`.
///
/// Entry `j` of the returned vector refers to class `j + 1`; background (0)
/// never produces a label.
pub fn derive_image_labels(mask: &Array2<u16>, k: usize, min_frac: f64) -> Result<Vec<bool>> {
    if !(min_frac > 0.0 && min_frac < 1.0) {
        return Err(Error::Config(format!("min_frac must lie in (0, 1), got {min_frac}")));
    }
    let mut counts = vec![0usize; k + 1];
    for &v in mask.iter() {
        let v = v as usize;
        if v > k {
            return Err(Error::Data(format!("mask value {v} exceeds class count {k}")));
        }
        counts[v] += 1;
    }
    let total = mask.len();
    if total == 0 {
        return Ok(vec![false; k]);
    }
    Ok(counts[1..]
        .iter()
        .map(|&c| c as f64 / total as f64 >= min_frac)
        .collect())
}

/// Foreground class indices (1-based) that are switched on.
pub fn present_classes(labels: &[bool]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(j, _)| j + 1)
        .collect()
}
