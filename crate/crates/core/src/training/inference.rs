use ndarray::{Array1, Array2, Array3, Ix1, Ix2, Ix3};
use std::rc::Rc;

use crate::autograd::{Tape, Tensor};
use crate::cam::{filter_cam, fuse_cams, normalize_cam, spatial_scores, temporal_scores, CamStack};
use crate::config::ExperimentConfig;
use crate::data::SitsSample;
use crate::encoder::{classify_global, Tsvit};
use crate::error::Result;
use crate::params::ParamStore;

/// Detached outputs of one evaluation-mode forward pass.
pub struct Inference {
    /// `[P, K, d]`
    pub z_t_dense: Array3<f64>,
    /// `[P, T, d]`
    pub z_t_seq: Array3<f64>,
    pub temporal_attention: Vec<Rc<Tensor>>,
    /// Pre-ReLU dense scores `[P, K]`.
    pub temporal_scores: Array2<f64>,
    pub spatial_scores: Array2<f64>,
    pub logits: Array1<f64>,
}

pub fn infer(cfg: &ExperimentConfig, params: &ParamStore, sample: &SitsSample) -> Result<Inference> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let model = Tsvit::new(&cfg.model, &bound);
    let out = model.forward(&sample.series, None)?;
    let w = bound.get("classifier.weight");
    let dim2 = |t: &Tensor| t.clone().into_dimensionality::<Ix2>().unwrap();
    Ok(Inference {
        z_t_dense: (*out.z_t_dense.value()).clone().into_dimensionality::<Ix3>().unwrap(),
        z_t_seq: (*out.z_t_seq.value()).clone().into_dimensionality::<Ix3>().unwrap(),
        temporal_attention: out.temporal_attention.clone(),
        temporal_scores: dim2(&temporal_scores(out.z_t_dense, w).value()),
        spatial_scores: dim2(&spatial_scores(out.z_s_dense, w).value()),
        logits: (*classify_global(out.z_s_global, w).value())
            .clone()
            .into_dimensionality::<Ix1>()
            .unwrap(),
    })
}

/// Normalized temporal, spatial and fused CAMs plus the filtered map.
pub fn cam_stack(cfg: &ExperimentConfig, inf: &Inference, image_labels: &[bool]) -> Result<CamStack> {
    let cam_temporal = normalize_cam(&inf.temporal_scores.mapv(|v| v.max(0.0)));
    let cam_spatial = normalize_cam(&inf.spatial_scores.mapv(|v| v.max(0.0)));
    let cam_fused = fuse_cams(&cam_temporal, &cam_spatial, cfg.cam.source, cfg.cam.renormalize)?;
    let cam_filtered = filter_cam(&cam_fused, cfg.cam.thresholds(), image_labels)?;
    Ok(CamStack {
        cam_temporal,
        cam_spatial,
        cam_fused,
        cam_filtered,
        cam_propagated: None,
        cb_cam: None,
    })
}

/// Micro-averaged F1 of multilabel predictions `logit > 0`.
pub fn classification_f1(cfg: &ExperimentConfig, params: &ParamStore, samples: &[SitsSample]) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for s in samples {
        let inf = infer(cfg, params, s)?;
        for (&z, &y) in inf.logits.iter().zip(&s.image_labels) {
            match (z > 0.0, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}
