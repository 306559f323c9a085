//! Clue-based CAMs: per-position evidence for a class from its positive
//! prototypes minus evidence from its negative prototypes.

use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::cam::normalize_cam;
use crate::clues::{Polarity, PrototypeBank};
use crate::error::{Error, Result};

/// Which embedding scores class `k` at a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingChoice {
    /// The class-`k` token of the position.
    #[default]
    ClassSlice,
    /// Mean over all class tokens of the position.
    ClassMean,
}

fn best_similarity(z: ArrayView1<f64>, bank: &PrototypeBank, class: usize, polarity: Polarity, tau: f64) -> Option<f64> {
    bank.active(class, polarity)
        .map(|(_, p)| z.dot(&p) / tau)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
}

/// Raw clue-based scores `[P, K]` from temporal dense embeddings `[P, K, d]`.
/// Absent classes are zero. A class without negative prototypes scores its
/// positive evidence alone.
pub fn cb_cam(
    z_t_dense: &Array3<f64>,
    bank: &PrototypeBank,
    image_labels: &[bool],
    choice: EmbeddingChoice,
) -> Result<Array2<f64>> {
    let (p, k, d) = z_t_dense.dim();
    if image_labels.len() != k || bank.num_classes() != k || bank.dim() != d {
        return Err(Error::Contract(format!(
            "cb_cam shapes disagree: z [{p}, {k}, {d}], labels {}, bank {}x{}",
            image_labels.len(),
            bank.num_classes(),
            bank.dim()
        )));
    }
    for (c, &present) in image_labels.iter().enumerate() {
        if present && !bank.any_initialized(c, Polarity::Positive) {
            return Err(Error::Generation(format!(
                "prototype bank has no positive prototypes for class {}",
                c + 1
            )));
        }
    }
    let tau = bank.tau;
    let mut y = Array2::<f64>::zeros((p, k));
    for i in 0..p {
        let mean = match choice {
            EmbeddingChoice::ClassMean => Some(z_t_dense.slice(s![i, .., ..]).mean_axis(ndarray::Axis(0)).unwrap()),
            EmbeddingChoice::ClassSlice => None,
        };
        for c in 0..k {
            if !image_labels[c] {
                continue;
            }
            let raw = match &mean {
                Some(m) => m.view(),
                None => z_t_dense.slice(s![i, c, ..]),
            };
            let norm = raw.dot(&raw).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "degenerate embedding at position {i} for class {}",
                    c + 1
                )));
            }
            let z: Array1<f64> = &raw / norm;
            let pos = best_similarity(z.view(), bank, c, Polarity::Positive, tau).unwrap();
            let neg = best_similarity(z.view(), bank, c, Polarity::Negative, tau).unwrap_or(0.0);
            y[[i, c]] = (pos - neg).max(0.0);
        }
    }
    Ok(y)
}

/// [`cb_cam`] followed by per-class min-max scaling.
pub fn cb_cam_normalized(
    z_t_dense: &Array3<f64>,
    bank: &PrototypeBank,
    image_labels: &[bool],
    choice: EmbeddingChoice,
) -> Result<Array2<f64>> {
    Ok(normalize_cam(&cb_cam(z_t_dense, bank, image_labels, choice)?))
}
