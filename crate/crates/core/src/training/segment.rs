use ndarray::{Array2, IxDyn};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{dropout_stream, streams, substream};
use crate::autograd::{Tape, Tensor, Var};
use crate::config::ExperimentConfig;
use crate::data::SitsSample;
use crate::encoder::{init_params, Tsvit};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, EvalReport};
use crate::params::{cosine_lr, xavier, zeros, AdamW, BoundParams, ParamStore};

/// Mask value excluded from the segmentation loss.
pub const IGNORE_LABEL: u16 = 255;

pub struct SegRun {
    pub params: ParamStore,
    /// Mean training loss per iteration.
    pub losses: Vec<f64>,
}

/// Fresh backbone plus a linear head over the concatenated per-class
/// spatial tokens of each patch.
pub fn init_segmenter(cfg: &ExperimentConfig) -> ParamStore {
    let mut rng = substream(cfg.seed, streams::SEG_INIT);
    let backbone = init_params(&cfg.model, &mut rng);
    let mut p = ParamStore::new();
    for (name, t) in backbone.iter().filter(|(n, _)| *n != "classifier.weight") {
        p.insert(name, t.clone());
    }
    let (k, d) = (cfg.model.k, cfg.model.d);
    p.insert("seg_head.weight", xavier(&mut rng, k * d, k + 1));
    p.insert("seg_head.bias", zeros(&[k + 1]));
    p
}

fn seg_logits<'t>(cfg: &ExperimentConfig, bound: &BoundParams<'t, '_>, sample: &SitsSample, drop: Option<&mut rand_chacha::ChaCha8Rng>) -> Result<Var<'t>> {
    let model = Tsvit::new(&cfg.model, bound);
    let z = model.patchify(&sample.series)?;
    let mut drop = drop;
    let (z_t_dense, _, _) = model.temporal_forward(z, None, drop.as_deref_mut())?;
    let (_, z_s_dense) = model.spatial_forward(z_t_dense, drop)?;
    let (k, d, p) = (cfg.model.k, cfg.model.d, cfg.model.num_patches());
    Ok(z_s_dense
        .permute(&[1, 0, 2])
        .reshape(&[p, k * d])
        .matmul(bound.get("seg_head.weight"))
        .add(bound.get("seg_head.bias")))
}

/// Per-patch label histograms `[P, K+1]` of a full-resolution mask,
/// skipping ignored pixels.
fn patch_counts(cfg: &ExperimentConfig, mask: &Array2<u16>) -> Result<Array2<f64>> {
    let (nh, nw) = cfg.model.grid();
    let (ph, pw) = (cfg.model.patch_h, cfg.model.patch_w);
    let labels = cfg.model.k + 1;
    if mask.dim() != (nh * ph, nw * pw) {
        return Err(Error::Data(format!("mask shape {:?} does not match the model", mask.dim())));
    }
    let mut counts = Array2::<f64>::zeros((nh * nw, labels));
    for ((y, x), &v) in mask.indexed_iter() {
        if v == IGNORE_LABEL {
            continue;
        }
        if v as usize >= labels {
            return Err(Error::Data(format!("mask label {v} outside 0..={}", labels - 1)));
        }
        counts[[(y / ph) * nw + x / pw, v as usize]] += 1.0;
    }
    Ok(counts)
}

/// Pixel cross-entropy of nearest-upsampled patch logits, averaged over
/// non-ignored pixels. Written over per-patch label counts.
fn soft_count_ce<'t>(logits: Var<'t>, counts: &Array2<f64>) -> Var<'t> {
    let z = logits.value();
    let (p, l) = counts.dim();
    let total: f64 = counts.sum();
    let mut grad = Tensor::zeros(IxDyn(&[p, l]));
    if total == 0.0 {
        return logits.tape().scalar_fn(logits, 0.0, grad);
    }
    let mut loss = 0.0;
    for i in 0..p {
        let m = (0..l).map(|j| z[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..l).map(|j| (z[[i, j]] - m).exp()).sum::<f64>().ln();
        let n: f64 = counts.row(i).sum();
        for j in 0..l {
            loss += counts[[i, j]] * (lse - z[[i, j]]);
            grad[[i, j]] = (n * (z[[i, j]] - lse).exp() - counts[[i, j]]) / total;
        }
    }
    logits.tape().scalar_fn(logits, loss / total, grad)
}

/// Trains a segmenter on `masks` (one per sample, same order).
pub fn train_segmentation(cfg: &ExperimentConfig, samples: &[SitsSample], masks: &[Array2<u16>]) -> Result<SegRun> {
    cfg.validate()?;
    if samples.is_empty() || samples.len() != masks.len() {
        return Err(Error::Data(format!(
            "{} samples but {} masks",
            samples.len(),
            masks.len()
        )));
    }
    let counts: Vec<Array2<f64>> = masks.iter().map(|m| patch_counts(cfg, m)).collect::<Result<_>>()?;
    let mut params = init_segmenter(cfg);
    let mut opt = AdamW::new(&params, cfg.seg.lr, cfg.seg.weight_decay);
    let mut batch_rng = substream(cfg.seed, streams::SEG_BATCH);
    let mut order: Vec<usize> = Vec::new();
    let batch = cfg.seg.batch_size.min(samples.len());
    let mut losses = Vec::with_capacity(cfg.seg.total_iters);
    for iter in 0..cfg.seg.total_iters {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut batch_rng);
                order.reverse();
            }
            idx.push(order.pop().unwrap());
        }
        let steps: Vec<(f64, Vec<Tensor>)> = idx
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let tape = Tape::new();
                let bound = params.bind(&tape);
                let mut drop = (cfg.model.dropout > 0.0)
                    .then(|| dropout_stream(cfg.seed, streams::SEG_DROPOUT, iter, slot));
                let logits = seg_logits(cfg, &bound, &samples[i], drop.as_mut())?;
                let loss = soft_count_ce(logits, &counts[i]);
                let value = loss.item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        iter,
                        breakdown: format!("segmentation loss on {}", samples[i].sample_id),
                    });
                }
                Ok((value, bound.collect_grads(&tape.backward(loss))))
            })
            .collect::<Result<_>>()?;
        let n = steps.len() as f64;
        let mut grads = steps[0].1.clone();
        for (_, g) in &steps[1..] {
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b;
            }
        }
        grads.iter_mut().for_each(|g| *g /= n);
        let lr = cosine_lr(cfg.seg.lr, iter, cfg.seg.total_iters, cfg.seg.min_lr_frac);
        opt.step(&mut params, &grads, lr)?;
        losses.push(steps.iter().map(|s| s.0).sum::<f64>() / n);
    }
    Ok(SegRun { params, losses })
}

/// Full-resolution predicted mask; ties go to the lowest label.
pub fn predict_mask(cfg: &ExperimentConfig, params: &ParamStore, sample: &SitsSample) -> Result<Array2<u16>> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let logits = seg_logits(cfg, &bound, sample, None)?.value();
    let (nh, nw) = cfg.model.grid();
    let labels: Vec<u16> = (0..nh * nw)
        .map(|i| {
            let row = logits.slice(ndarray::s![i, ..]);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u16
        })
        .collect();
    Ok(crate::cam::upsample_labels(
        &ndarray::Array1::from(labels),
        nh,
        nw,
        cfg.model.patch_h,
        cfg.model.patch_w,
    ))
}

/// Predictions on `samples` scored against their ground-truth masks.
pub fn evaluate_segmentation(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    samples: &[SitsSample],
) -> Result<(Vec<Array2<u16>>, EvalReport)> {
    let preds: Vec<Array2<u16>> = samples
        .par_iter()
        .map(|s| predict_mask(cfg, params, s))
        .collect::<Result<_>>()?;
    let mut conf = Confusion::new(cfg.model.k + 1);
    for (p, s) in preds.iter().zip(samples) {
        conf.accumulate(p.view(), s.mask.view())?;
    }
    let report = conf.finalize(cfg.eval.include_background)?;
    Ok((preds, report))
}
