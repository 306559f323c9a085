//! Class activation maps: dense scores, normalization, fusion, filtering
//! and thresholding into pseudo masks.

use ndarray::{Array1, Array2, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{minmax_columns, Tensor, Var};
use crate::error::{Error, Result};

/// Which dense embedding space the raw CAM comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CamSource {
    Temporal,
    Spatial,
    #[default]
    Fused,
}

impl std::str::FromStr for CamSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(CamSource::Temporal),
            "spatial" => Ok(CamSource::Spatial),
            "fused" => Ok(CamSource::Fused),
            other => Err(Error::Config(format!("unknown cam source '{other}'"))),
        }
    }
}

/// Reliability of one (pixel, class) entry after filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reliability {
    Background,
    Foreground,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub mu_low: f64,
    pub mu_high: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            mu_low: 0.2,
            mu_high: 0.4,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.mu_low && self.mu_low < self.mu_high && self.mu_high <= 1.0) {
            return Err(Error::Config(format!(
                "filter thresholds need 0 <= mu_low < mu_high <= 1, got ({}, {})",
                self.mu_low, self.mu_high
            )));
        }
        Ok(())
    }
}

/// All CAM variants for one sample, each `[P, K]`.
#[derive(Debug, Clone)]
pub struct CamStack {
    pub cam_temporal: Array2<f64>,
    pub cam_spatial: Array2<f64>,
    pub cam_fused: Array2<f64>,
    pub cam_filtered: Array2<Reliability>,
    pub cam_propagated: Option<Array2<f64>>,
    pub cb_cam: Option<Array2<f64>>,
}

/// Pre-ReLU class scores from temporal dense tokens `[P, K, d]`.
pub fn temporal_scores<'t>(z_t_dense: Var<'t>, weights: Var<'t>) -> Var<'t> {
    z_t_dense.mul(weights).sum_axis(2)
}

/// Pre-ReLU class scores from spatial dense tokens `[K, P, d]`, returned as `[P, K]`.
pub fn spatial_scores<'t>(z_s_dense: Var<'t>, weights: Var<'t>) -> Var<'t> {
    let w = weights.shape();
    z_s_dense
        .mul(weights.reshape(&[w[0], 1, w[1]]))
        .sum_axis(2)
        .permute(&[1, 0])
}

/// `ReLU(w_k . token(i, k))` on plain arrays; tokens are `[P, K, d]`.
pub fn dense_cam(tokens: &ndarray::Array3<f64>, weights: &Array2<f64>) -> Result<Array2<f64>> {
    let (p, k, d) = tokens.dim();
    if weights.dim() != (k, d) {
        return Err(Error::Contract(format!(
            "classifier weights {:?} do not match tokens [{p}, {k}, {d}]",
            weights.dim()
        )));
    }
    Ok(Array2::from_shape_fn((p, k), |(i, c)| {
        let s: f64 = (0..d).map(|j| tokens[[i, c, j]] * weights[[c, j]]).sum();
        s.max(0.0)
    }))
}

/// Per-class min-max scaling to `[0, 1]`; constant channels become zeros.
pub fn normalize_cam(raw: &Array2<f64>) -> Array2<f64> {
    minmax_columns(&raw.clone().into_dyn())
        .into_dimensionality::<Ix2>()
        .unwrap()
}

/// Combines normalized temporal and spatial CAMs.
pub fn fuse_cams(
    cam_temporal: &Array2<f64>,
    cam_spatial: &Array2<f64>,
    source: CamSource,
    renormalize: bool,
) -> Result<Array2<f64>> {
    if cam_temporal.dim() != cam_spatial.dim() {
        return Err(Error::Contract(format!(
            "cam shapes differ: {:?} vs {:?}",
            cam_temporal.dim(),
            cam_spatial.dim()
        )));
    }
    Ok(match source {
        CamSource::Temporal => cam_temporal.clone(),
        CamSource::Spatial => cam_spatial.clone(),
        CamSource::Fused => {
            let mean = (cam_temporal + cam_spatial) * 0.5;
            if renormalize {
                normalize_cam(&mean)
            } else {
                mean
            }
        }
    })
}

/// Differentiable counterpart of [`fuse_cams`] over normalized `[P, K]` maps.
pub fn fuse_cams_var<'t>(
    cam_temporal: Var<'t>,
    cam_spatial: Var<'t>,
    source: CamSource,
    renormalize: bool,
) -> Var<'t> {
    match source {
        CamSource::Temporal => cam_temporal,
        CamSource::Spatial => cam_spatial,
        CamSource::Fused => {
            let mean = cam_temporal.add(cam_spatial).scale(0.5);
            if renormalize {
                mean.minmax_columns()
            } else {
                mean
            }
        }
    }
}

/// Tri-state filtering; absent classes are entirely ignored.
pub fn filter_cam(
    cam: &Array2<f64>,
    thresholds: FilterThresholds,
    image_labels: &[bool],
) -> Result<Array2<Reliability>> {
    thresholds.validate()?;
    check_labels(cam, image_labels)?;
    Ok(Array2::from_shape_fn(cam.dim(), |(i, k)| {
        if !image_labels[k] {
            return Reliability::Ignore;
        }
        let m = cam[[i, k]];
        if m <= thresholds.mu_low {
            Reliability::Background
        } else if m >= thresholds.mu_high {
            Reliability::Foreground
        } else {
            Reliability::Ignore
        }
    }))
}

/// Per-position label: `1 + argmax_k` if the best present-class score
/// exceeds `theta_bg`, else background. Ties go to the lowest class.
pub fn pseudo_mask(cam: &Array2<f64>, theta_bg: f64, image_labels: &[bool]) -> Result<Array1<u16>> {
    check_labels(cam, image_labels)?;
    Ok(cam
        .rows()
        .into_iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (k, &v) in row.iter().enumerate() {
                if !image_labels[k] {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, v)) if v > theta_bg => (k + 1) as u16,
                _ => 0,
            }
        })
        .collect())
}

fn check_labels(cam: &Array2<f64>, labels: &[bool]) -> Result<()> {
    if cam.ncols() != labels.len() {
        return Err(Error::Contract(format!(
            "cam has {} classes but labels have {}",
            cam.ncols(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy with logits over classes.
pub fn bce_with_logits<'t>(logits: Var<'t>, targets: &[bool]) -> Var<'t> {
    let z = logits.value();
    assert_eq!(z.len(), targets.len(), "logit/label length mismatch");
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for (&zi, &yi) in z.iter().zip(targets) {
        let y = if yi { 1.0 } else { 0.0 };
        loss += zi.max(0.0) - zi * y + (-zi.abs()).exp().ln_1p();
        let sig = 1.0 / (1.0 + (-zi).exp());
        grad.push((sig - y) / n);
    }
    let grad = Tensor::from_shape_vec(IxDyn(z.shape()), grad).unwrap();
    logits.tape().scalar_fn(logits, loss / n, grad)
}

/// Sum over sources of BCE on position-averaged pre-ReLU scores `[P, K]`.
pub fn aux_cls_loss<'t>(scores: &[Var<'t>], image_labels: &[bool]) -> Var<'t> {
    let mut total: Option<Var<'t>> = None;
    for &s in scores {
        let l = bce_with_logits(s.mean_axis(0), image_labels);
        total = Some(match total {
            Some(t) => t.add(l),
            None => l,
        });
    }
    total.expect("aux_cls_loss needs at least one source")
}

/// Nearest upsampling of per-patch labels `[Nh*Nw]` to `[H, W]`.
pub fn upsample_labels(labels: &Array1<u16>, nh: usize, nw: usize, ph: usize, pw: usize) -> Array2<u16> {
    Array2::from_shape_fn((nh * ph, nw * pw), |(y, x)| labels[(y / ph) * nw + x / pw])
}
