use std::fmt;

use ndarray::{s, Array2, Ix2, Ix3};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{dropout_stream, loss_weights, streams, substream, total_loss_var};
use crate::affinity::{refine_cam, tap_loss};
use crate::autograd::{Tape, Tensor};
use crate::cam::{aux_cls_loss, bce_with_logits, filter_cam, fuse_cams_var, spatial_scores, temporal_scores, Reliability};
use crate::clues::{cbl_loss, CblOptions, Polarity, PrototypeBank};
use crate::config::ExperimentConfig;
use crate::data::SitsSample;
use crate::encoder::{classify_global, extract_patches, init_params, Tsvit};
use crate::error::{Error, Result};
use crate::params::{cosine_lr, AdamW, ParamStore};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_aux: f64,
    pub l_cbl: f64,
    pub l_tap: f64,
    pub total: f64,
    pub cbl_pairs: usize,
    /// Largest Sinkhorn marginal residual of this iteration's bank updates.
    pub bank_residual: f64,
    pub bank_updates: usize,
    pub bank_skipped: usize,
}

impl fmt::Display for IterRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} lr={:e} l_cls={:e} l_aux={:e} l_cbl={:e} l_tap={:e} total={:e} cbl_pairs={} bank_residual={:e} bank_updates={} bank_skipped={}",
            self.iter,
            self.lr,
            self.l_cls,
            self.l_aux,
            self.l_cbl,
            self.l_tap,
            self.total,
            self.cbl_pairs,
            self.bank_residual,
            self.bank_updates,
            self.bank_skipped
        )
    }
}

pub struct ClassifierRun {
    pub params: ParamStore,
    pub bank: PrototypeBank,
    pub log: Vec<IterRecord>,
}

struct SampleStep {
    grads: Vec<Tensor>,
    l_cls: f64,
    l_aux: f64,
    l_cbl: f64,
    l_tap: f64,
    total: f64,
    cbl_pairs: usize,
    /// Detached class-slice embeddings per class: (foreground, background).
    clusters: Vec<(Vec<f64>, Vec<f64>)>,
}

fn sample_step(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    bank: &PrototypeBank,
    sample: &SitsSample,
    iter: usize,
    slot: usize,
) -> Result<SampleStep> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let model = Tsvit::new(&cfg.model, &bound);
    let mut drop_rng = (cfg.model.dropout > 0.0).then(|| dropout_stream(cfg.seed, streams::DROPOUT, iter, slot));
    let out = model.forward(&sample.series, drop_rng.as_mut())?;
    let labels = &sample.image_labels;
    let w = bound.get("classifier.weight");

    let l_cls = bce_with_logits(classify_global(out.z_s_global, w), labels);
    let st = temporal_scores(out.z_t_dense, w);
    let ss = spatial_scores(out.z_s_dense, w);
    let l_aux = aux_cls_loss(&[st, ss], labels);

    let cam = fuse_cams_var(
        st.relu().minmax_columns(),
        ss.relu().minmax_columns(),
        cfg.cam.source,
        cfg.cam.renormalize,
    );
    let cam_value = (*cam.value()).clone().into_dimensionality::<Ix2>().unwrap();
    let filtered = filter_cam(&cam_value, cfg.cam.thresholds(), labels)?;

    let opts = CblOptions {
        tau: cfg.clues.tau,
        include_positive_in_denominator: cfg.clues.include_positive_in_denominator,
    };
    let cbl = cbl_loss(out.z_t_dense, &filtered, bank, labels, opts)?;

    let z_t_seq = (*out.z_t_seq.value()).clone().into_dimensionality::<Ix3>().unwrap();
    let patches = match cfg.affinity.source {
        crate::affinity::AffinitySource::LowLevel => Some(extract_patches(&sample.series, &cfg.model)?),
        crate::affinity::AffinitySource::Temporal => None,
    };
    let (_, refined) = refine_cam(
        &cam_value,
        &z_t_seq,
        &out.temporal_attention,
        patches.as_ref(),
        cfg.model.grid(),
        &cfg.affinity,
    )?;
    let l_tap = tap_loss(cam, &refined, labels)?;

    let total = total_loss_var(l_cls, l_aux, cbl.loss, l_tap, &cfg.train, &cfg.ablation, iter);
    let step = SampleStep {
        grads: Vec::new(),
        l_cls: l_cls.item(),
        l_aux: l_aux.item(),
        l_cbl: cbl.loss.item(),
        l_tap: l_tap.item(),
        total: total.item(),
        cbl_pairs: cbl.participating,
        clusters: cluster_inputs(&out.z_t_dense.value(), &filtered, labels),
    };
    if !step.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iter,
            breakdown: format!(
                "sample {}: l_cls={} l_aux={} l_cbl={} l_tap={}",
                sample.sample_id, step.l_cls, step.l_aux, step.l_cbl, step.l_tap
            ),
        });
    }
    let grads = bound.collect_grads(&tape.backward(total));
    Ok(SampleStep { grads, ..step })
}

/// Foreground and background class-slice embeddings of present classes,
/// flattened row-major.
fn cluster_inputs(z_t_dense: &Tensor, filtered: &Array2<Reliability>, labels: &[bool]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let z = z_t_dense.view().into_dimensionality::<Ix3>().unwrap();
    let (p, k, _) = z.dim();
    (0..k)
        .map(|c| {
            let (mut fg, mut bg) = (Vec::new(), Vec::new());
            if labels[c] {
                for i in 0..p {
                    let target = match filtered[[i, c]] {
                        Reliability::Foreground => &mut fg,
                        Reliability::Background => &mut bg,
                        Reliability::Ignore => continue,
                    };
                    target.extend(z.slice(s![i, c, ..]).iter());
                }
            }
            (fg, bg)
        })
        .collect()
}

/// Trains the classifier and prototype bank. `on_iter` sees every log record
/// as it is produced.
pub fn train_classifier(
    cfg: &ExperimentConfig,
    samples: &[SitsSample],
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<ClassifierRun> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut params = init_params(&cfg.model, &mut substream(cfg.seed, streams::INIT));
    let d = cfg.model.d;
    let k = cfg.model.k;
    let mut bank = PrototypeBank::new(k, cfg.clues.num_prototypes, d, cfg.clues.alpha, cfg.clues.tau)?;
    let mut opt = AdamW::new(&params, cfg.train.lr, cfg.train.weight_decay);
    let mut batch_rng = substream(cfg.seed, streams::BATCH);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.train.total_iters);
    let batch = cfg.train.batch_size.min(samples.len());

    for iter in 0..cfg.train.total_iters {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut batch_rng);
                order.reverse();
            }
            idx.push(order.pop().unwrap());
        }
        let steps: Vec<SampleStep> = idx
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| sample_step(cfg, &params, &bank, &samples[i], iter, slot))
            .collect::<Result<_>>()?;

        let n = steps.len() as f64;
        let mut grads: Vec<Tensor> = steps[0].grads.clone();
        for st in &steps[1..] {
            for (g, s) in grads.iter_mut().zip(&st.grads) {
                *g += s;
            }
        }
        grads.iter_mut().for_each(|g| *g /= n);
        let lr = cosine_lr(cfg.train.lr, iter, cfg.train.total_iters, cfg.train.min_lr_frac);
        opt.step(&mut params, &grads, lr)?;

        let mut record = IterRecord {
            iter,
            lr,
            l_cls: steps.iter().map(|s| s.l_cls).sum::<f64>() / n,
            l_aux: steps.iter().map(|s| s.l_aux).sum::<f64>() / n,
            l_cbl: steps.iter().map(|s| s.l_cbl).sum::<f64>() / n,
            l_tap: steps.iter().map(|s| s.l_tap).sum::<f64>() / n,
            total: steps.iter().map(|s| s.total).sum::<f64>() / n,
            cbl_pairs: steps.iter().map(|s| s.cbl_pairs).sum(),
            bank_residual: 0.0,
            bank_updates: 0,
            bank_skipped: 0,
        };
        debug_assert!({
            let (w1, w2) = loss_weights(&cfg.train, &cfg.ablation, iter);
            let recombined = record.l_cls + record.l_aux + w1 * record.l_cbl + w2 * record.l_tap;
            (recombined - record.total).abs() <= 1e-9 * record.total.abs().max(1.0)
        });

        for c in 0..k {
            for (pol, pick) in [(Polarity::Positive, 0), (Polarity::Negative, 1)] {
                let flat: Vec<f64> = steps
                    .iter()
                    .flat_map(|s| if pick == 0 { &s.clusters[c].0 } else { &s.clusters[c].1 })
                    .copied()
                    .collect();
                let z = Array2::from_shape_vec((flat.len() / d, d), flat).unwrap();
                match bank.update(c, pol, &z, cfg.clues.sinkhorn())? {
                    Some(a) => {
                        record.bank_updates += 1;
                        record.bank_residual = record.bank_residual.max(a.residual);
                    }
                    None => record.bank_skipped += 1,
                }
            }
        }
        on_iter(&record);
        log.push(record);
    }
    Ok(ClassifierRun { params, bank, log })
}
