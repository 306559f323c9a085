use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::inference::{cam_stack, infer};
use crate::cam::{pseudo_mask, upsample_labels};
use crate::cbcam::cb_cam_normalized;
use crate::clues::PrototypeBank;
use crate::config::ExperimentConfig;
use crate::data::SitsSample;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    RawCam,
    CbCam,
}

impl PseudoMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PseudoMode::RawCam => "raw_cam",
            PseudoMode::CbCam => "cb_cam",
        }
    }
}

impl std::str::FromStr for PseudoMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_cam" => Ok(PseudoMode::RawCam),
            "cb_cam" => Ok(PseudoMode::CbCam),
            other => Err(Error::Config(format!("unknown pseudo-label mode '{other}'"))),
        }
    }
}

/// Full-resolution pseudo masks `[H, W]`, one per sample, in input order.
pub fn pseudo_masks(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    bank: Option<&PrototypeBank>,
    samples: &[SitsSample],
    mode: PseudoMode,
) -> Result<Vec<Array2<u16>>> {
    if mode == PseudoMode::CbCam && bank.is_none() {
        return Err(Error::Generation("prototype bank missing for cb_cam mode".into()));
    }
    let (nh, nw) = cfg.model.grid();
    samples
        .par_iter()
        .map(|s| {
            let inf = infer(cfg, params, s)?;
            let cam = match mode {
                PseudoMode::RawCam => cam_stack(cfg, &inf, &s.image_labels)?.cam_fused,
                PseudoMode::CbCam => {
                    cb_cam_normalized(&inf.z_t_dense, bank.unwrap(), &s.image_labels, cfg.cam.cb_embedding)?
                }
            };
            let labels = pseudo_mask(&cam, cfg.cam.theta_bg, &s.image_labels)?;
            Ok(upsample_labels(&labels, nh, nw, cfg.model.patch_h, cfg.model.patch_w))
        })
        .collect()
}
