use std::path::{Path, PathBuf};
use std::process::Command;

use exact_core::checkpoint::directory_digest;
use exact_core::config::ExperimentConfig;
use exact_core::data::{generate_sample, SitsSample, Split};

use crate::{Checks, Outcome};

/// Desk model on a handful of samples with a few iterations per stage.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(seed);
    cfg.data.n_train = 8;
    cfg.data.n_test = 4;
    cfg.train.total_iters = 6;
    cfg.train.warmup_iters = 2;
    cfg.train.batch_size = 4;
    cfg.seg.total_iters = 4;
    cfg.seg.batch_size = 4;
    cfg
}

pub fn tiny_samples(cfg: &ExperimentConfig) -> (Vec<SitsSample>, Vec<SitsSample>) {
    let make = |split: Split, n: usize| {
        (0..n)
            .map(|i| generate_sample(&cfg.data.synth, split.stream_tag(), i, cfg.data.min_frac).unwrap())
            .collect()
    };
    (make(Split::Train, cfg.data.n_train), make(Split::Test, cfg.data.n_test))
}

/// Runs every subcommand in order under `root`; returns `(step, output dir)`.
fn pipeline(root: &Path, config: &Path, threads: &str) -> Result<Vec<(String, PathBuf)>, String> {
    let exe = env!("CARGO_BIN_EXE_exact");
    let data = root.join("data");
    let cls = root.join("cls");
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let steps: Vec<(&str, Vec<String>, PathBuf)> = vec![
        ("synth", vec![], data.clone()),
        ("train-cls", vec!["--data".into(), p("data")], cls.clone()),
        (
            "pseudo",
            vec!["--data".into(), p("data"), "--checkpoint".into(), p("cls"), "--mode".into(), "cb_cam".into()],
            root.join("pseudo_cb"),
        ),
        (
            "pseudo",
            vec!["--data".into(), p("data"), "--checkpoint".into(), p("cls"), "--mode".into(), "raw_cam".into()],
            root.join("pseudo_raw"),
        ),
        ("train-seg", vec!["--data".into(), p("data"), "--masks".into(), p("pseudo_cb")], root.join("seg")),
        ("eval", vec!["--data".into(), p("data"), "--pred".into(), p("pseudo_raw")], root.join("eval_pred")),
        (
            "eval",
            vec!["--data".into(), p("data"), "--split".into(), "test".into(), "--checkpoint".into(), p("seg")],
            root.join("eval_seg"),
        ),
        ("ablate", vec!["--data".into(), p("data")], root.join("ablate")),
        ("plot", vec!["--data".into(), p("data"), "--checkpoint".into(), p("cls")], root.join("plot")),
    ];
    let mut outputs = Vec::new();
    for (name, args, out) in steps {
        let result = Command::new(exe)
            .arg(name)
            .arg("--config")
            .arg(config)
            .args(["--seed", "3"])
            .args(&args)
            .arg("--out")
            .arg(&out)
            .env("EXACT_NUM_THREADS", threads)
            .output()
            .map_err(|e| e.to_string())?;
        if !result.status.success() {
            return Err(format!("{name} failed ({}): {}", result.status, String::from_utf8_lossy(&result.stderr)));
        }
        outputs.push((format!("{name} -> {}", out.file_name().unwrap().to_string_lossy()), out));
    }
    Ok(outputs)
}

pub fn criterion() -> Outcome {
    let tmp = tempfile::tempdir().expect("temp dir");
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, tiny_config(3).to_toml().unwrap()).unwrap();
    let mut checks = Checks::default();
    // Different worker counts must not change any byte.
    let runs: Vec<_> = [("a", "1"), ("b", "3")]
        .iter()
        .map(|(name, threads)| pipeline(&tmp.path().join(name), &config, threads))
        .collect();
    match (&runs[0], &runs[1]) {
        (Ok(a), Ok(b)) => {
            for ((step, da), (_, db)) in a.iter().zip(b) {
                checks.run(step, || {
                    let (x, y) = (directory_digest(da).map_err(|e| e.to_string())?, directory_digest(db).map_err(|e| e.to_string())?);
                    Ok(x == y)
                });
            }
        }
        (Err(e), _) | (_, Err(e)) => checks.check(&format!("pipeline: {e}"), false),
    }
    checks.outcome("subcommand outputs bit-identical across two runs")
}
