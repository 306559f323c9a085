use std::sync::OnceLock;
use std::time::{Duration, Instant};

use exact_core::config::ExperimentConfig;
use exact_core::data::{generate_sample, SitsSample, Split};
use exact_core::experiment::{run_ablation, run_supervision_ratio, AblationRow};
use exact_core::training::{pseudo_masks, PseudoMode};
use ndarray::Array2;

use crate::{within_budget, Outcome};

/// Fixed before any run; not tuned.
const SEED: u64 = 0;
const ORDER_TOLERANCE: f64 = 0.005;
const MARGIN: f64 = 0.02;

struct Shared {
    cfg: ExperimentConfig,
    train: Vec<SitsSample>,
    test: Vec<SitsSample>,
    rows: Vec<AblationRow>,
    table: String,
    exact_masks: Vec<Array2<u16>>,
    raw_masks: Vec<Array2<u16>>,
    elapsed: Duration,
}

fn samples(cfg: &ExperimentConfig, split: Split, n: usize) -> Result<Vec<SitsSample>, String> {
    (0..n)
        .map(|i| generate_sample(&cfg.data.synth, split.stream_tag(), i, cfg.data.min_frac).map_err(|e| e.to_string()))
        .collect()
}

fn shared() -> &'static Result<Shared, String> {
    static SHARED: OnceLock<Result<Shared, String>> = OnceLock::new();
    SHARED.get_or_init(|| {
        let start = Instant::now();
        let cfg = ExperimentConfig::desk(SEED);
        let train = samples(&cfg, Split::Train, cfg.data.n_train)?;
        let test = samples(&cfg, Split::Test, cfg.data.n_test)?;
        let ablation = run_ablation(&cfg, &train, |m| eprintln!("[trend] {m}")).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let table = ablation.to_table();
        let full = &ablation.full_run;
        let exact_masks = pseudo_masks(&cfg, &full.params, Some(&full.bank), &train, PseudoMode::CbCam)
            .map_err(|e| e.to_string())?;
        let raw_masks = pseudo_masks(&cfg, &ablation.baseline_run.params, None, &train, PseudoMode::RawCam)
            .map_err(|e| e.to_string())?;
        Ok(Shared {
            cfg,
            train,
            test,
            rows: ablation.rows,
            table,
            exact_masks,
            raw_masks,
            elapsed,
        })
    })
}

pub fn criterion_ablation() -> Outcome {
    let s = match shared() {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, e.clone()),
    };
    let names: Vec<&str> = s.rows.iter().map(|r| r.name).collect();
    let miou: Vec<f64> = s.rows.iter().map(|r| r.report.miou).collect();
    let mut problems = Vec::new();
    if names != ["baseline", "+tap", "+cbl+tap", "full"] {
        problems.push(format!("row order {names:?}"));
    }
    for w in 0..miou.len().saturating_sub(1) {
        if miou[w + 1] < miou[w] - ORDER_TOLERANCE {
            problems.push(format!("{} {:.4} < {} {:.4} beyond tolerance", names[w + 1], miou[w + 1], names[w], miou[w]));
        }
    }
    // CB-CAM against the raw CAM of the same trained model.
    let margin = miou[3] - miou[2];
    if margin < MARGIN {
        problems.push(format!("cb-cam margin {margin:.4} below {MARGIN}"));
    }
    if !within_budget(s.elapsed, 15 * 60) {
        problems.push(format!("runtime {:.0}s exceeds 15 min", s.elapsed.as_secs_f64()));
    }
    let summary = format!(
        "seed {SEED}, mIoU {} (cb-cam margin {:+.2} points, ablation {:.0}s)",
        names.iter().zip(&miou).map(|(n, m)| format!("{n}={:.4}", m)).collect::<Vec<_>>().join(" "),
        100.0 * margin,
        s.elapsed.as_secs_f64()
    );
    println!("{}", s.table.trim_end());
    Outcome::new(problems.is_empty(), if problems.is_empty() { summary } else { format!("{summary}; {}", problems.join("; ")) })
}

pub fn criterion_ratio() -> Outcome {
    let s = match shared() {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, e.clone()),
    };
    let start = Instant::now();
    let outcome = match run_supervision_ratio(&s.cfg, &s.train, &s.test, &s.exact_masks, &s.raw_masks, |m| {
        eprintln!("[ratio] {m}")
    }) {
        Ok(o) => o,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    println!("{}", outcome.to_table().trim_end());
    let mut problems = Vec::new();
    if outcome.exact_ratio < outcome.raw_ratio {
        problems.push("exact ratio below raw-cam ratio".to_string());
    }
    if !within_budget(elapsed, 20 * 60) {
        problems.push(format!("runtime {:.0}s exceeds 20 min", elapsed.as_secs_f64()));
    }
    let summary = format!(
        "test mIoU full {:.4}, exact {:.4} (ratio {:.3}), raw {:.4} (ratio {:.3}), {:.0}s",
        outcome.full.miou,
        outcome.exact.miou,
        outcome.exact_ratio,
        outcome.raw.miou,
        outcome.raw_ratio,
        elapsed.as_secs_f64()
    );
    Outcome::new(problems.is_empty(), if problems.is_empty() { summary } else { format!("{summary}; {}", problems.join("; ")) })
}
