//! Classifier training with the full objective, pseudo-label generation and
//! downstream segmentation.

mod classifier;
mod inference;
mod pseudo;
mod segment;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::{AblationFlags, TrainConfig};

pub use classifier::{train_classifier, ClassifierRun, IterRecord};
pub use inference::{cam_stack, classification_f1, infer, Inference};
pub use pseudo::{pseudo_masks, PseudoMode};
pub use segment::{
    evaluate_segmentation, init_segmenter, predict_mask, train_segmentation, SegRun, IGNORE_LABEL,
};

/// Named random streams derived from the experiment seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SEG_INIT: u64 = 4;
    pub const SEG_BATCH: u64 = 5;
    pub const SEG_DROPOUT: u64 = 6;
}

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-sample dropout stream for `(iteration, slot)` of a given stream id.
pub(crate) fn dropout_stream(seed: u64, stream: u64, iter: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((iter as u64) << 20 | slot as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Weights of the contrastive and alignment terms at `iter`.
pub fn loss_weights(cfg: &TrainConfig, flags: &AblationFlags, iter: usize) -> (f64, f64) {
    let w_cbl = if flags.disable_cbl || iter < cfg.warmup_iters { 0.0 } else { cfg.lambda1 };
    let w_tap = if flags.disable_tap { 0.0 } else { cfg.lambda2 };
    (w_cbl, w_tap)
}

pub fn total_loss(
    l_cls: f64,
    l_aux: f64,
    l_cbl: f64,
    l_tap: f64,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    iter: usize,
) -> f64 {
    let (w_cbl, w_tap) = loss_weights(cfg, flags, iter);
    l_cls + l_aux + w_cbl * l_cbl + w_tap * l_tap
}

/// Tape version of [`total_loss`].
pub fn total_loss_var<'t>(
    l_cls: Var<'t>,
    l_aux: Var<'t>,
    l_cbl: Var<'t>,
    l_tap: Var<'t>,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    iter: usize,
) -> Var<'t> {
    let (w_cbl, w_tap) = loss_weights(cfg, flags, iter);
    l_cls.add(l_aux).add(l_cbl.scale(w_cbl)).add(l_tap.scale(w_tap))
}
