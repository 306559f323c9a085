use std::path::Path;
use std::process::Command;
use std::rc::Rc;

use exact_core::affinity::{
    extract_t2c_attention, pairwise_affinity, propagate, reweight, tap_loss, AttentionLayer, SigmaMode,
    TemporalClassAttention,
};
use exact_core::autograd::{Tape, Tensor};
use exact_core::cam::{
    bce_with_logits, dense_cam, filter_cam, fuse_cams, normalize_cam, pseudo_mask, CamSource, FilterThresholds,
    Reliability,
};
use exact_core::cbcam::{cb_cam, EmbeddingChoice};
use exact_core::checkpoint::{directory_digest, save_model};
use exact_core::clues::{
    cbl_loss, similarity, sinkhorn_assign, AssignmentMatrix, CblOptions, Polarity, PrototypeBank, SinkhornParams,
};
use exact_core::config::{AblationFlags, ExperimentConfig, TrainConfig};
use exact_core::data::{derive_image_labels, generate_sample, synth_dataset, Split, SynthConfig};
use exact_core::encoder::{classify_global, init_params, ModelConfig, Tsvit};
use exact_core::experiment::score_masks;
use exact_core::metrics::{supervision_ratio, Confusion};
use exact_core::tensor_io::{decode_tensor, encode_tensor, read_tensor_file, write_tensor_file, TensorData};
use exact_core::training::{
    evaluate_segmentation, pseudo_masks, total_loss, train_classifier, train_segmentation, PseudoMode,
};
use exact_core::Error;
use ndarray::{arr1, arr2, Array2, Array3, Array4, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Checks, Outcome};

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn exact_eq(a: f64, b: f64) -> bool {
    a == b
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + b.abs())
}

/// Bank whose `(class, polarity)` slot holds exactly the given unit rows.
fn bank_with(k: usize, d: usize, slots: &[(usize, Polarity, Vec<f64>)]) -> PrototypeBank {
    let mut bank = PrototypeBank::new(k, 1, d, 0.5, 0.1).unwrap();
    for (c, pol, v) in slots {
        let z = Array2::from_shape_vec((1, d), v.clone()).unwrap();
        bank.update(*c, *pol, &z, SinkhornParams::default()).unwrap();
    }
    bank
}

fn data_examples(c: &mut Checks, tmp: &Path) {
    c.run("synth seed 7 twice is byte-identical", || {
        let cfg = SynthConfig::desk(7);
        let a = synth_dataset(&cfg, 4, Split::Train, 0.01, &tmp.join("s7a")).map_err(err)?;
        let b = synth_dataset(&cfg, 4, Split::Train, 0.01, &tmp.join("s7b")).map_err(err)?;
        Ok(a.entries == b.entries
            && directory_digest(&tmp.join("s7a")).map_err(err)? == directory_digest(&tmp.join("s7b")).map_err(err)?)
    });
    c.run("cloud_prob 0 keeps timestep means below max profile + 4 noise std", || {
        let mut cfg = SynthConfig::desk(11);
        cfg.cloud_prob = 0.0;
        let bound = cfg.profile_max() + 4.0 * cfg.noise_std;
        for i in 0..16 {
            let s = generate_sample(&cfg, Split::Train.stream_tag(), i, 0.01).map_err(err)?;
            for step in s.series.axis_iter(Axis(0)) {
                if step.mean().unwrap() as f64 > bound {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    });
    c.run("all-background mask gives no labels", || {
        Ok(derive_image_labels(&Array2::zeros((10, 10)), 4, 0.01).map_err(err)? == vec![false; 4])
    });
    c.run("no pixels of class 1 gives label 1 = 0", || {
        let mut m = Array2::<u16>::zeros((10, 10));
        m[[0, 0]] = 2;
        Ok(!derive_image_labels(&m, 4, 0.01).map_err(err)?[0])
    });
    c.run("tensor round trip of a 3x2x4x4 series", || {
        let series = TensorData::F32(
            Array4::from_shape_fn((3, 2, 4, 4), |(a, b, y, x)| (a * 100 + b * 10 + y) as f32 + x as f32 * 0.25).into_dyn(),
        );
        let path = tmp.join("rt.stsr");
        write_tensor_file(&path, &series).map_err(err)?;
        Ok(read_tensor_file(&path).map_err(err)? == series)
    });
    c.run("wrong magic is a format error", || {
        let mut bytes = encode_tensor(&TensorData::U16(Array2::<u16>::zeros((2, 2)).into_dyn())).map_err(err)?;
        bytes[0] = b'X';
        Ok(matches!(decode_tensor(&bytes, Path::new("x")), Err(Error::Format { .. })))
    });
    c.run("payload length mismatch is a format error", || {
        let mut bytes = encode_tensor(&TensorData::U16(Array2::<u16>::zeros((2, 2)).into_dyn())).map_err(err)?;
        bytes.truncate(bytes.len() - 2);
        Ok(matches!(decode_tensor(&bytes, Path::new("x")), Err(Error::Format { .. })))
    });
}

fn encoder_examples(c: &mut Checks) {
    let desk = ModelConfig::desk(4, 12, 4, 16, 16);
    c.run("T=1 patch tokens have middle dim 1", || {
        let cfg = ModelConfig { t: 1, ..desk.clone() };
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let z = Tsvit::new(&cfg, &bound).patchify(&Array4::zeros((1, 4, 16, 16))).map_err(err)?;
        Ok(z.shape() == [64, 1, cfg.d])
    });
    c.run("zero input and zero bias give zero tokens", || {
        let mut params = init_params(&desk, &mut ChaCha8Rng::seed_from_u64(2));
        params.insert("patch.bias", Tensor::zeros(IxDyn(&[desk.d])));
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let z = Tsvit::new(&desk, &bound).patchify(&Array4::zeros((12, 4, 16, 16))).map_err(err)?;
        let zero = z.value().iter().all(|&v| v == 0.0);
        Ok(zero)
    });
    c.run("temporal sequence length K+T = 16 and attention rows sum to 1", || {
        let params = init_params(&desk, &mut ChaCha8Rng::seed_from_u64(3));
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let model = Tsvit::new(&desk, &bound);
        let series = Array4::from_shape_fn((12, 4, 16, 16), |(t, ch, y, x)| ((t * 7 + ch * 3 + y + x) % 11) as f32 / 11.0);
        let out = model.forward(&series, None).map_err(err)?;
        let a = out.temporal_attention.last().unwrap();
        let rows_ok = a
            .lanes(Axis(3))
            .into_iter()
            .all(|row| (row.sum() - 1.0).abs() <= 1e-5);
        Ok(a.shape() == [64, desk.heads, 16, 16]
            && rows_ok
            && out.z_s_dense.shape() == [4, 64, desk.d]
            && out.z_s_global.shape() == [4, desk.d]
            && 1 + out.z_s_dense.shape()[1] == 65)
    });
    c.run("classify_global examples", || {
        let tape = Tape::new();
        let d = 3;
        let e1 = Tensor::from_shape_fn(IxDyn(&[2, d]), |ix| if ix[1] == 0 { 1.0 } else { 0.0 });
        let w = tape.constant(e1.clone());
        let logits = classify_global(tape.constant(e1.clone()), w).value().to_owned();
        let zeros = classify_global(tape.constant(Tensor::zeros(IxDyn(&[2, d]))), w).value().to_owned();
        let tokens = Tensor::from_shape_fn(IxDyn(&[2, d]), |ix| (ix[0] + 2 * ix[1]) as f64 - 1.5);
        let single = classify_global(tape.constant(tokens.clone()), w).value().to_owned();
        let double = classify_global(tape.constant(tokens * 2.0), w).value().to_owned();
        Ok(logits.iter().all(|&v| v == 1.0)
            && zeros.iter().all(|&v| v == 0.0)
            && double.iter().zip(single.iter()).all(|(a, b)| *a == 2.0 * b))
    });
}

fn cam_examples(c: &mut Checks) {
    c.run("dense cam e1/e1, e1/-e1, 2e1", || {
        let w = arr2(&[[1.0, 0.0]]);
        let cam = |v: [f64; 2]| dense_cam(&Array3::from_shape_vec((1, 1, 2), v.to_vec()).unwrap(), &w);
        Ok(cam([1.0, 0.0]).map_err(err)?[[0, 0]] == 1.0
            && cam([-1.0, 0.0]).map_err(err)?[[0, 0]] == 0.0
            && cam([2.0, 0.0]).map_err(err)?[[0, 0]] == 2.0)
    });
    c.run("normalize [0,2,4], constant, already unit", || {
        let a = normalize_cam(&arr2(&[[0.0, 3.0, 0.0], [2.0, 3.0, 0.5], [4.0, 3.0, 1.0]]));
        Ok(a.column(0).to_vec() == vec![0.0, 0.5, 1.0]
            && a.column(1).to_vec() == vec![0.0; 3]
            && a.column(2).to_vec() == vec![0.0, 0.5, 1.0])
    });
    c.run("fusion of identical maps and temporal-only mode", || {
        let t = arr2(&[[0.0, 1.0], [0.25, 0.5], [1.0, 0.0]]);
        let s = arr2(&[[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]);
        Ok(fuse_cams(&t, &t, CamSource::Fused, true).map_err(err)? == t
            && fuse_cams(&t, &t, CamSource::Fused, false).map_err(err)? == t
            && fuse_cams(&t, &s, CamSource::Temporal, true).map_err(err)? == t)
    });
    c.run("filter 0.5 -> foreground, 0.3 -> ignore", || {
        let f = filter_cam(&arr2(&[[0.5], [0.3]]), FilterThresholds { mu_low: 0.2, mu_high: 0.4 }, &[true])
            .map_err(err)?;
        Ok(f[[0, 0]] == Reliability::Foreground && f[[1, 0]] == Reliability::Ignore)
    });
    c.run("pseudo mask [0.9,0.2] -> 1, tie -> 1", || {
        let m = pseudo_mask(&arr2(&[[0.9, 0.2], [0.5, 0.5]]), 0.1, &[true, true]).map_err(err)?;
        Ok(m.to_vec() == vec![1, 1])
    });
    c.run("bce saturation, ln 2 at zero, single-class formula", || {
        let tape = Tape::new();
        let sat = bce_with_logits(tape.constant(arr1(&[20.0, -20.0, 20.0]).into_dyn()), &[true, false, true]).item();
        let half = bce_with_logits(tape.constant(arr1(&[0.0, 0.0]).into_dyn()), &[true, false]).item();
        let z = 0.7f64;
        let single = bce_with_logits(tape.constant(arr1(&[z]).into_dyn()), &[true]).item();
        Ok(sat < 1e-6 && close(half, 2f64.ln()) && close(single, (-z).exp().ln_1p()))
    });
}

fn clue_examples(c: &mut Checks) {
    let params = SinkhornParams::default();
    c.run("single prototype row equals the column marginal", || {
        let p = arr2(&[[1.0, 0.0]]);
        let z = arr2(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let a = sinkhorn_assign(&p, &z, params).map_err(err)?.ok_or("no assignment")?;
        Ok(a.c.iter().all(|&v| close(v, 1.0 / 3.0)))
    });
    c.run("swap symmetry of the assignment", || {
        let p = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let z = arr2(&[[0.8, 0.6], [0.6, 0.8]]);
        let a = sinkhorn_assign(&p, &z, params).map_err(err)?.ok_or("no assignment")?.c;
        Ok((a[[0, 0]] - a[[1, 1]]).abs() < 1e-12 && (a[[0, 1]] - a[[1, 0]]).abs() < 1e-12)
    });
    c.run("momentum alpha 1 keeps, alpha 0 with uniform row takes the normalized mean", || {
        let z = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let uniform = AssignmentMatrix {
            c: arr2(&[[0.5, 0.5]]),
            row_marginal: arr1(&[1.0]),
            col_marginal: arr1(&[0.5, 0.5]),
            residual: 0.0,
            iterations: 0,
        };
        let mut keep = PrototypeBank::new(1, 1, 2, 1.0, 0.1).map_err(err)?;
        keep.update(0, Polarity::Positive, &arr2(&[[0.6, 0.8]]), params).map_err(err)?;
        let before = keep.prototypes(0, Polarity::Positive).clone();
        keep.momentum_update(0, Polarity::Positive, &uniform, &z).map_err(err)?;
        let mut reset = PrototypeBank::new(1, 1, 2, 0.0, 0.1).map_err(err)?;
        reset.update(0, Polarity::Positive, &arr2(&[[0.6, 0.8]]), params).map_err(err)?;
        reset.momentum_update(0, Polarity::Positive, &uniform, &z).map_err(err)?;
        let h = 0.5f64.sqrt();
        let p = reset.prototypes(0, Polarity::Positive);
        Ok(keep.prototypes(0, Polarity::Positive) == before && close(p[[0, 0]], h) && close(p[[0, 1]], h))
    });
    c.run("similarity 10, 0, -10", || {
        let z = arr1(&[0.6, 0.8]);
        let perp = arr1(&[-0.8, 0.6]);
        Ok(close(similarity(z.view(), z.view(), 0.1).map_err(err)?, 10.0)
            && similarity(z.view(), perp.view(), 0.1).map_err(err)?.abs() < 1e-12
            && close(similarity(z.view(), (-&z).view(), 0.1).map_err(err)?, -10.0))
    });
    c.run("contrastive term -10, absent class 0, two-negative log-sum-exp", || {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let fg = Array2::from_elem((1, 2), Reliability::Foreground);
        let tape = Tape::new();
        let z = tape.constant(Array3::from_shape_vec((1, 2, 3), [e1.clone(), e1.clone()].concat()).unwrap().into_dyn());
        let bank = bank_with(2, 3, &[(0, Polarity::Positive, e1.clone()), (0, Polarity::Negative, e2.clone())]);
        let one = cbl_loss(z, &fg, &bank, &[true, false], CblOptions::default()).map_err(err)?;
        let absent = cbl_loss(z, &fg, &bank, &[false, false], CblOptions::default()).map_err(err)?;
        let (a, b) = (0.6f64, 0.3f64);
        let n1 = vec![a, (1.0 - a * a).sqrt(), 0.0];
        let n2 = vec![b, 0.0, (1.0 - b * b).sqrt()];
        let bank2 = bank_with(
            2,
            3,
            &[(0, Polarity::Positive, e1.clone()), (0, Polarity::Negative, n1), (1, Polarity::Negative, n2)],
        );
        let two = cbl_loss(z, &fg, &bank2, &[true, false], CblOptions::default()).map_err(err)?;
        let expected = ((a / 0.1).exp() + (b / 0.1).exp()).ln() - 10.0;
        Ok(close(one.loss.item(), -10.0) && absent.loss.item() == 0.0 && (two.loss.item() - expected).abs() < 1e-9)
    });
    c.run("cb-cam 10 and relu", || {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let bank = bank_with(1, 2, &[(0, Polarity::Positive, e1.clone()), (0, Polarity::Negative, e2.clone())]);
        let z = Array3::from_shape_vec((2, 1, 2), vec![1.0, 0.0, 0.1, 1.0]).unwrap();
        let y = cb_cam(&z, &bank, &[true], EmbeddingChoice::ClassSlice).map_err(err)?;
        Ok(close(y[[0, 0]], 10.0) && y[[1, 0]] == 0.0)
    });
}

fn affinity_examples(c: &mut Checks) {
    c.run("constant attention gives 1/T columns of shape [12 x 4]", || {
        let (k, t) = (4, 12);
        let a = Rc::new(Tensor::from_elem(IxDyn(&[3, 2, k + t, k + t]), 1.0 / (k + t) as f64));
        let attn = extract_t2c_attention(&[a], k, AttentionLayer::Last).map_err(err)?;
        Ok(attn.a_tilde.dim() == (t, k)
            && attn.a_tilde.iter().all(|&v| (v - 1.0 / t as f64).abs() < 1e-12)
            && attn.a_tilde.columns().into_iter().all(|col| (col.sum() - 1.0).abs() <= 1e-5))
    });
    c.run("reweight: uniform, one-hot, (0.25, 0.75)", || {
        let z = Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let with = |w: Vec<f64>| reweight(&z, &TemporalClassAttention { a_tilde: Array2::from_shape_vec((2, 1), w).unwrap() });
        let uniform = with(vec![0.5, 0.5]).map_err(err)?;
        let onehot = with(vec![0.0, 1.0]).map_err(err)?;
        let mixed = with(vec![0.25, 0.75]).map_err(err)?;
        Ok(uniform.iter().copied().collect::<Vec<_>>() == vec![0.5, 0.5]
            && onehot.iter().copied().collect::<Vec<_>>() == vec![0.0, 1.0]
            && mixed.iter().copied().collect::<Vec<_>>() == vec![0.25, 0.75])
    });
    c.run("identical vectors give constant affinity; orthogonal neighbours give 1", || {
        let same = pairwise_affinity(&Array2::from_shape_fn((9, 3), |(_, j)| j as f64), 3, 3, SigmaMode::VectorStd)
            .map_err(err)?;
        let first = same.value(4, 0).unwrap();
        let constant = (0..9).all(|i| same.neighbors[i].iter().all(|&(j, _)| same.value(i, j) == Some(first)));
        let orth = pairwise_affinity(&arr2(&[[1.0, 0.0], [0.0, 1.0]]), 1, 2, SigmaMode::VectorStd).map_err(err)?;
        Ok(constant && orth.value(0, 1) == Some(1.0))
    });
    c.run("constant cam is unchanged; range never expands", || {
        let aff = pairwise_affinity(&Array2::from_shape_fn((16, 3), |(i, j)| ((i * 5 + j * 3) % 7) as f64), 4, 4, SigmaMode::VectorStd)
            .map_err(err)?;
        let flat = Array2::from_elem((16, 1), 0.37);
        let out = propagate(&flat, std::slice::from_ref(&aff), 5).map_err(err)?;
        let cam = Array2::from_shape_fn((16, 1), |(i, _)| ((i * 7) % 5) as f64 / 4.0);
        let moved = propagate(&cam, &[aff], 3).map_err(err)?;
        let (lo, hi) = (0.0, 1.0);
        Ok(out.iter().all(|&v| (v - 0.37).abs() < 1e-15) && moved.iter().all(|&v| v >= lo && v <= hi))
    });
    c.run("tap: equal maps 0, constant 0.2 gap, absent class 0", || {
        let tape = Tape::new();
        let m = arr2(&[[0.1, 0.5], [0.3, 0.9]]);
        let mv = tape.constant(m.clone().into_dyn());
        let zero = tap_loss(mv, &m, &[true, true]).map_err(err)?.item();
        let gap = tap_loss(mv, &m.mapv(|v| v + 0.2), &[true, false]).map_err(err)?.item();
        let absent = tap_loss(mv, &m.mapv(|v| v + 0.2), &[false, false]).map_err(err)?.item();
        Ok(zero == 0.0 && (gap - 0.2).abs() < 1e-12 && absent == 0.0)
    });
}

fn tiny(seed: u64) -> ExperimentConfig {
    let mut cfg = crate::determinism::tiny_config(seed);
    cfg.train.total_iters = 4;
    cfg.train.warmup_iters = 1;
    cfg
}

fn training_examples(c: &mut Checks) {
    c.run("total loss 2.025, baseline and warm-up", || {
        let t = TrainConfig {
            lambda1: 0.01,
            lambda2: 0.015,
            warmup_iters: 10,
            ..ExperimentConfig::desk(0).train
        };
        let flags = AblationFlags::default();
        let zero = TrainConfig { lambda1: 0.0, lambda2: 0.0, ..t.clone() };
        Ok(exact_eq(total_loss(1.0, 1.0, 1.0, 1.0, &t, &flags, 10), 2.025)
            && exact_eq(total_loss(0.4, 0.3, 5.0, 7.0, &zero, &flags, 20), 0.4 + 0.3)
            && exact_eq(total_loss(1.0, 1.0, 1.0, 1.0, &t, &flags, 9), 2.015))
    });

    let cfg = tiny(5);
    let data = crate::determinism::tiny_samples(&cfg);
    c.run("same seed gives the same final loss", || {
        let a = train_classifier(&cfg, &data.0, |_| {}).map_err(err)?;
        let b = train_classifier(&cfg, &data.0, |_| {}).map_err(err)?;
        let (la, lb) = (a.log.last().unwrap().total, b.log.last().unwrap().total);
        Ok((la - lb).abs() <= 1e-6)
    });
    c.run("both terms disabled: bank updates, loss and gradients exclude the terms", || {
        let mut flagged = cfg.clone();
        flagged.ablation.disable_cbl = true;
        flagged.ablation.disable_tap = true;
        let mut zeroed = cfg.clone();
        zeroed.train.lambda1 = 0.0;
        zeroed.train.lambda2 = 0.0;
        let a = train_classifier(&flagged, &data.0, |_| {}).map_err(err)?;
        let b = train_classifier(&zeroed, &data.0, |_| {}).map_err(err)?;
        let updates = a.log.iter().all(|r| r.bank_updates > 0);
        // Batch means of per-sample sums; only summation order differs.
        let totals = a.log.iter().all(|r| (r.total - (r.l_cls + r.l_aux)).abs() <= 1e-12 * r.total.abs());
        let same_params = a.params.values() == b.params.values();
        if !(updates && totals && same_params) {
            return Err(format!("updates {updates}, totals {totals}, same params {same_params}"));
        }
        Ok(a.bank.any_initialized(0, Polarity::Positive))
    });
    c.run("pseudo masks contain only present classes", || {
        let run = train_classifier(&cfg, &data.0, |_| {}).map_err(err)?;
        for mode in [PseudoMode::RawCam, PseudoMode::CbCam] {
            let masks = pseudo_masks(&cfg, &run.params, Some(&run.bank), &data.0, mode).map_err(err)?;
            for (m, s) in masks.iter().zip(&data.0) {
                if m.iter().any(|&v| v != 0 && !s.image_labels[v as usize - 1]) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    });
    c.run("all-background supervision collapses to background", || {
        let mut seg = cfg.clone();
        seg.seg.total_iters = 40;
        seg.seg.lr = 5e-3;
        let masks: Vec<Array2<u16>> = data.0.iter().map(|s| Array2::zeros(s.mask.raw_dim())).collect();
        let run = train_segmentation(&seg, &data.0, &masks).map_err(err)?;
        let (preds, _) = evaluate_segmentation(&seg, &run.params, &data.1).map_err(err)?;
        let mut fg_only = seg.clone();
        fg_only.eval.include_background = false;
        let report = score_masks(&fg_only, &preds, &data.1).map_err(err)?;
        Ok(preds.iter().all(|p| p.iter().all(|&v| v == 0)) && report.miou == 0.0)
    });
}

fn metric_examples(c: &mut Checks) {
    c.run("confusion updates", || {
        let mut conf = Confusion::new(3);
        let twos = Array2::from_elem((2, 2), 2u16);
        conf.accumulate(twos.view(), twos.view()).map_err(err)?;
        let four = conf.counts()[[2, 2]] == 4;
        let before = conf.clone();
        conf.accumulate_slices(&[], &[]).map_err(err)?;
        let unchanged = conf == before;
        let mut one = Confusion::new(2);
        one.accumulate(arr2(&[[0u16, 1], [1, 1]]).view(), arr2(&[[1u16, 1], [1, 1]]).view()).map_err(err)?;
        Ok(four && unchanged && one.counts()[[1, 0]] == 1)
    });
    c.run("fdr 0.25 and perfect prediction", || {
        let conf = Confusion::from_counts(arr2(&[[5, 1], [0, 3]])).map_err(err)?;
        let r = conf.finalize(true).map_err(err)?;
        let mut perfect = Confusion::new(3);
        let m = arr2(&[[0u16, 1], [2, 2]]);
        perfect.accumulate(m.view(), m.view()).map_err(err)?;
        let p = perfect.finalize(true).map_err(err)?;
        Ok(close(r.fdr[1], 0.25) && p.oa == 1.0 && p.miou == 1.0 && p.fdr.iter().all(|&f| f == 0.0))
    });
    c.run("supervision ratio 1 and 0", || {
        Ok(supervision_ratio(0.7, 0.7).map_err(err)? == 1.0 && supervision_ratio(0.0, 0.7).map_err(err)? == 0.0)
    });
}

fn cli_examples(c: &mut Checks, tmp: &Path) {
    let exe = env!("CARGO_BIN_EXE_exact");
    c.run("synth --seed 7 twice gives identical digests", || {
        let mut digests = Vec::new();
        for name in ["cli7a", "cli7b"] {
            let dir = tmp.join(name);
            let cfg_path = tmp.join("tiny.toml");
            std::fs::write(&cfg_path, tiny(7).to_toml().map_err(err)?).map_err(err)?;
            let st = Command::new(exe)
                .args(["synth", "--seed", "7", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&dir)
                .output()
                .map_err(err)?;
            if !st.status.success() {
                return Err(String::from_utf8_lossy(&st.stderr).into_owned());
            }
            digests.push(directory_digest(&dir).map_err(err)?);
        }
        Ok(digests[0] == digests[1])
    });
    c.run("pseudo --mode cb_cam without a bank exits 1", || {
        let cfg = tiny(7);
        let ckpt = tmp.join("nobank");
        let params = init_params(&cfg.model, &mut ChaCha8Rng::seed_from_u64(1));
        save_model(&ckpt, "classifier", &cfg.model, &params).map_err(err)?;
        let cfg_path = tmp.join("tiny.toml");
        let out = Command::new(exe)
            .args(["pseudo", "--mode", "cb_cam", "--seed", "7", "--config"])
            .arg(&cfg_path)
            .arg("--data")
            .arg(tmp.join("cli7a"))
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--out")
            .arg(tmp.join("nobank_out"))
            .output()
            .map_err(err)?;
        let stderr = String::from_utf8_lossy(&out.stderr);
        Ok(out.status.code() == Some(1) && stderr.contains("prototype bank missing"))
    });
    c.run("unknown flag is a usage error", || {
        let out = Command::new(exe).args(["synth", "--bogus"]).output().map_err(err)?;
        Ok(out.status.code() == Some(2))
    });
}

pub fn criterion() -> Outcome {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut c = Checks::default();
    data_examples(&mut c, tmp.path());
    encoder_examples(&mut c);
    cam_examples(&mut c);
    clue_examples(&mut c);
    affinity_examples(&mut c);
    training_examples(&mut c);
    metric_examples(&mut c);
    cli_examples(&mut c, tmp.path());
    c.outcome("examples")
}
