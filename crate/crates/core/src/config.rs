//! Experiment configuration shared by every command, stored as TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affinity::AffinityConfig;
use crate::cam::{CamSource, FilterThresholds};
use crate::cbcam::EmbeddingChoice;
use crate::clues::SinkhornParams;
use crate::data::{SynthConfig, DEFAULT_MIN_FRAC};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub min_frac: f64,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: usize,
    /// First iteration at which the contrastive term is applied.
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CluesConfig {
    pub eta: f64,
    pub tau: f64,
    pub alpha: f64,
    pub num_prototypes: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub include_positive_in_denominator: bool,
}

impl CluesConfig {
    pub fn sinkhorn(&self) -> SinkhornParams {
        SinkhornParams {
            eta: self.eta,
            max_iters: self.sinkhorn_iters,
            tol: self.sinkhorn_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    pub source: CamSource,
    pub renormalize: bool,
    pub mu_low: f64,
    pub mu_high: f64,
    pub theta_bg: f64,
    pub cb_embedding: EmbeddingChoice,
}

impl CamConfig {
    pub fn thresholds(&self) -> FilterThresholds {
        FilterThresholds {
            mu_low: self.mu_low,
            mu_high: self.mu_high,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AblationFlags {
    pub disable_cbl: bool,
    pub disable_tap: bool,
    /// Pseudo labels come from raw CAMs even when a bank exists.
    pub disable_cbcam: bool,
}

impl AblationFlags {
    /// Parses a comma-separated list such as `disable_cbl,disable_tap`.
    pub fn apply_list(&mut self, list: &str) -> Result<()> {
        for flag in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match flag {
                "disable_cbl" => self.disable_cbl = true,
                "disable_tap" => self.disable_tap = true,
                "disable_cbcam" => self.disable_cbcam = true,
                other => return Err(Error::Config(format!("unknown ablation flag '{other}'"))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub min_lr_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub include_background: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub clues: CluesConfig,
    pub cam: CamConfig,
    pub affinity: AffinityConfig,
    pub ablation: AblationFlags,
    pub seg: SegConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Small synthetic benchmark sized for a single CPU core.
    ///
    /// The schedule is 300 iterations, so the warm-up keeps the 4k/15k
    /// proportion and the prototype momentum is rescaled to keep the same
    /// number of effective updates per run.
    pub fn desk(seed: u64) -> Self {
        let synth = SynthConfig::desk(seed);
        let model = ModelConfig::desk(synth.k, synth.t, synth.c, synth.h, synth.w);
        let total_iters = 300;
        ExperimentConfig {
            seed,
            data: DataConfig {
                n_train: 64,
                n_test: 32,
                min_frac: DEFAULT_MIN_FRAC,
                synth,
            },
            model,
            train: TrainConfig {
                total_iters,
                warmup_iters: total_iters * 4 / 15,
                batch_size: 8,
                // Short runs need a larger step than the reference schedule.
                lr: 1e-2,
                weight_decay: 0.01,
                min_lr_frac: 0.0,
                lambda1: 0.01,
                lambda2: 0.015,
            },
            clues: CluesConfig {
                alpha: 1.0 - 0.001 * 15000.0 / total_iters as f64,
                ..CluesConfig::reference()
            },
            cam: CamConfig::reference(),
            affinity: AffinityConfig::default(),
            ablation: AblationFlags::default(),
            seg: SegConfig {
                total_iters: 300,
                batch_size: 8,
                lr: 1e-3,
                weight_decay: 0.01,
                min_lr_frac: 0.0,
            },
            eval: EvalConfig {
                include_background: true,
            },
        }
    }

    /// Reference model sizes and schedule.
    pub fn paper(seed: u64) -> Self {
        let mut cfg = Self::desk(seed);
        let s = &cfg.data.synth;
        cfg.model = ModelConfig::paper(s.k, s.t, s.c, s.h, s.w);
        cfg.train.total_iters = 15_000;
        cfg.train.warmup_iters = 4_000;
        cfg.train.lr = 1e-3;
        cfg.clues = CluesConfig::reference();
        cfg.seg.total_iters = 15_000;
        cfg
    }

    pub fn preset(preset: Preset, seed: u64) -> Self {
        match preset {
            Preset::Desk => Self::desk(seed),
            Preset::Paper => Self::paper(seed),
        }
    }

    /// Replaces the seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.model.validate()?;
        self.cam.thresholds().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.data.synth;
        let m = &self.model;
        if (s.k, s.t, s.c, s.h, s.w) != (m.k, m.t, m.c, m.h, m.w) {
            return bad(format!(
                "data dimensions (K={}, T={}, C={}, {}x{}) differ from the model's (K={}, T={}, C={}, {}x{})",
                s.k, s.t, s.c, s.h, s.w, m.k, m.t, m.c, m.h, m.w
            ));
        }
        let t = &self.train;
        if t.total_iters == 0 || t.batch_size == 0 {
            return bad("train.total_iters and train.batch_size must be positive".into());
        }
        if t.warmup_iters >= t.total_iters {
            return bad(format!(
                "warmup_iters ({}) must be below total_iters ({})",
                t.warmup_iters, t.total_iters
            ));
        }
        if !(t.lambda1 >= 0.0 && t.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(t.lr > 0.0) || !(self.seg.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.seg.total_iters == 0 || self.seg.batch_size == 0 {
            return bad("seg.total_iters and seg.batch_size must be positive".into());
        }
        let c = &self.clues;
        if !(c.eta > 0.0 && c.tau > 0.0) || !(0.0..=1.0).contains(&c.alpha) || c.num_prototypes == 0 {
            return bad(format!("invalid clue settings: {c:?}"));
        }
        if self.affinity.iters == 0 {
            return bad("affinity.iters must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.cam.theta_bg) {
            return bad(format!("theta_bg must lie in [0, 1], got {}", self.cam.theta_bg));
        }
        if self.data.n_train == 0 {
            return bad("data.n_train must be at least 1".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Writes the effective configuration as `config.toml` inside `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}

impl CluesConfig {
    pub fn reference() -> Self {
        CluesConfig {
            eta: 0.05,
            tau: 0.1,
            alpha: 0.999,
            num_prototypes: 2,
            sinkhorn_iters: 50,
            sinkhorn_tol: 1e-4,
            include_positive_in_denominator: false,
        }
    }
}

impl CamConfig {
    pub fn reference() -> Self {
        CamConfig {
            source: CamSource::Fused,
            renormalize: true,
            mu_low: 0.2,
            mu_high: 0.4,
            theta_bg: 0.3,
            cb_embedding: EmbeddingChoice::ClassSlice,
        }
    }
}
