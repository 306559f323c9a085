use std::rc::Rc;
use std::time::Instant;

use exact_core::affinity::{extract_t2c_attention, pairwise_affinity, propagate, refine_cam, AffinityConfig, AttentionLayer, SigmaMode};
use exact_core::autograd::Tensor;
use exact_core::cam::{filter_cam, normalize_cam, pseudo_mask, FilterThresholds, Reliability};
use exact_core::config::ExperimentConfig;
use exact_core::data::{generate_sample, Split};
use exact_core::encoder::init_params;
use exact_core::training::{cam_stack, infer};
use ndarray::{Array2, Array3, IxDyn};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{within_budget, Checks, Outcome};

const CASES: u32 = 100;

fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn randn2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn labels_from(rng: &mut ChaCha8Rng, k: usize) -> Vec<bool> {
    (0..k).map(|_| rng.random_bool(0.5)).collect()
}

fn column_range(a: &Array2<f64>, c: usize) -> (f64, f64) {
    a.column(c).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn in_unit_interval(a: &Array2<f64>) -> bool {
    a.iter().all(|v| (0.0..=1.0).contains(v))
}

/// Reliability expected from the thresholding rule, computed independently.
fn expected_reliability(m: f64, present: bool, t: FilterThresholds) -> Reliability {
    match (present, m <= t.mu_low, m >= t.mu_high) {
        (false, _, _) => Reliability::Ignore,
        (true, true, _) => Reliability::Background,
        (true, false, true) => Reliability::Foreground,
        (true, false, false) => Reliability::Ignore,
    }
}

fn mask_uses_present_only(mask: &[u16], labels: &[bool]) -> bool {
    mask.iter().all(|&m| m == 0 || labels.get(m as usize - 1).copied().unwrap_or(false))
}

fn softmax_rows(raw: &mut Tensor) {
    let n = *raw.shape().last().unwrap();
    for row in raw.as_slice_mut().unwrap().chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
}

fn random_inputs() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 2usize..6, 2usize..6, 1usize..6)
}

fn random_properties(checks: &mut Checks) {
    checks.run("normalized cams lie in [0, 1]", || {
        runner()
            .run(&random_inputs(), |(seed, nh, nw, k)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let raw = randn2(&mut rng, nh * nw, k, 3.0).mapv(|v| v.max(0.0));
                prop_assert!(in_unit_interval(&normalize_cam(&raw)));
                Ok(())
            })
            .map(|_| true)
            .map_err(|e| e.to_string())
    });

    checks.run("filter_cam is a tri-state partition", || {
        runner()
            .run(&(random_inputs(), 0.0f64..0.5, 0.01f64..0.5), |((seed, nh, nw, k), lo, gap)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = FilterThresholds {
                    mu_low: lo,
                    mu_high: (lo + gap).min(1.0),
                };
                let cam = Array2::from_shape_simple_fn((nh * nw, k), || rng.random::<f64>());
                let labels = labels_from(&mut rng, k);
                let f = filter_cam(&cam, t, &labels).unwrap();
                for ((i, c), r) in f.indexed_iter() {
                    prop_assert_eq!(*r, expected_reliability(cam[[i, c]], labels[c], t));
                }
                Ok(())
            })
            .map(|_| true)
            .map_err(|e| e.to_string())
    });

    checks.run("pseudo_mask emits only present classes", || {
        runner()
            .run(&(random_inputs(), 0.0f64..1.0), |((seed, nh, nw, k), theta)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cam = Array2::from_shape_simple_fn((nh * nw, k), || rng.random::<f64>());
                let labels = labels_from(&mut rng, k);
                let mask = pseudo_mask(&cam, theta, &labels).unwrap();
                prop_assert!(mask_uses_present_only(mask.as_slice().unwrap(), &labels));
                Ok(())
            })
            .map(|_| true)
            .map_err(|e| e.to_string())
    });

    checks.run("propagation never expands a class range", || {
        runner()
            .run(&(random_inputs(), 1usize..5, 2usize..9), |((seed, nh, nw, k), iters, d)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = nh * nw;
                let cam = Array2::from_shape_simple_fn((p, k), || rng.random::<f64>());
                let affs: Vec<_> = (0..k)
                    .map(|_| pairwise_affinity(&randn2(&mut rng, p, d, 1.0), nh, nw, SigmaMode::VectorStd).unwrap())
                    .collect();
                let out = propagate(&cam, &affs, iters).unwrap();
                for c in 0..k {
                    let (lo, hi) = column_range(&cam, c);
                    let (olo, ohi) = column_range(&out, c);
                    prop_assert!(olo >= lo - 1e-12 && ohi <= hi + 1e-12);
                }
                Ok(())
            })
            .map(|_| true)
            .map_err(|e| e.to_string())
    });

    checks.run("class-to-time attention columns sum to 1", || {
        runner()
            .run(&(random_inputs(), 1usize..4, 2usize..13, 1usize..4), |((seed, _, _, k), heads, t, layers)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = k + t;
                let stack: Vec<Rc<Tensor>> = (0..layers)
                    .map(|_| {
                        let mut a = Tensor::from_shape_simple_fn(IxDyn(&[3, heads, n, n]), || {
                            2.0 * rng.sample::<f64, _>(StandardNormal)
                        });
                        softmax_rows(&mut a);
                        Rc::new(a)
                    })
                    .collect();
                for layer in [AttentionLayer::Last, AttentionLayer::Mean] {
                    let a = extract_t2c_attention(&stack, k, layer).unwrap().a_tilde;
                    prop_assert_eq!(a.dim(), (t, k));
                    for col in a.columns() {
                        prop_assert!((col.sum() - 1.0).abs() < 1e-9);
                        prop_assert!(col.iter().all(|&v| v >= 0.0));
                    }
                }
                Ok(())
            })
            .map(|_| true)
            .map_err(|e| e.to_string())
    });
}

/// The same invariants on maps produced by a randomly initialized encoder
/// from generated samples.
fn model_properties(checks: &mut Checks) {
    let cfg = ExperimentConfig::desk(3);
    let mut init_rng = ChaCha8Rng::seed_from_u64(3);
    let params = init_params(&cfg.model, &mut init_rng);
    let (nh, nw) = cfg.model.grid();
    let mut violations: Vec<String> = Vec::new();
    for i in 0..CASES as usize {
        let sample = match generate_sample(&cfg.data.synth, Split::Train.stream_tag(), i, cfg.data.min_frac) {
            Ok(s) => s,
            Err(e) => {
                violations.push(format!("sample {i}: {e}"));
                continue;
            }
        };
        let result = (|| -> exact_core::Result<Vec<&'static str>> {
            let mut bad = Vec::new();
            let inf = infer(&cfg, &params, &sample)?;
            let stack = cam_stack(&cfg, &inf, &sample.image_labels)?;
            for cam in [&stack.cam_temporal, &stack.cam_spatial, &stack.cam_fused] {
                if !in_unit_interval(cam) {
                    bad.push("cam outside [0, 1]");
                }
            }
            let t = cfg.cam.thresholds();
            for ((p, c), r) in stack.cam_filtered.indexed_iter() {
                if *r != expected_reliability(stack.cam_fused[[p, c]], sample.image_labels[c], t) {
                    bad.push("filter partition");
                }
            }
            let mask = pseudo_mask(&stack.cam_fused, cfg.cam.theta_bg, &sample.image_labels)?;
            if !mask_uses_present_only(mask.as_slice().unwrap(), &sample.image_labels) {
                bad.push("absent class in pseudo mask");
            }
            let z_t_seq: &Array3<f64> = &inf.z_t_seq;
            let (attn, refined) = refine_cam(
                &stack.cam_fused,
                z_t_seq,
                &inf.temporal_attention,
                None,
                (nh, nw),
                &AffinityConfig::default(),
            )?;
            for c in 0..cfg.model.k {
                let (lo, hi) = column_range(&stack.cam_fused, c);
                let (olo, ohi) = column_range(&refined, c);
                if olo < lo - 1e-12 || ohi > hi + 1e-12 {
                    bad.push("propagation expanded a range");
                }
            }
            if attn.a_tilde.columns().into_iter().any(|col| (col.sum() - 1.0).abs() > 1e-9) {
                bad.push("attention column sum");
            }
            Ok(bad)
        })();
        match result {
            Ok(bad) => violations.extend(bad.into_iter().map(|b| format!("sample {i}: {b}"))),
            Err(e) => violations.push(format!("sample {i}: {e}")),
        }
    }
    violations.dedup();
    let first: Vec<String> = violations.iter().take(3).cloned().collect();
    checks.run(&format!("encoder outputs on {CASES} generated samples {first:?}"), || Ok(violations.is_empty()));
}

pub fn criterion() -> Outcome {
    let start = Instant::now();
    let mut checks = Checks::default();
    random_properties(&mut checks);
    model_properties(&mut checks);
    checks.check("runtime under 10s", within_budget(start.elapsed(), 10));
    checks.outcome(&format!("property groups x {CASES} cases"))
}
