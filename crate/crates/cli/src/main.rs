//! `exact`: synthesize data, train, generate pseudo labels, segment,
//! evaluate, ablate and plot.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use exact_core::checkpoint::{directory_digest, load_bank, load_model, save_bank, save_model, BANK_DIR};
use exact_core::config::{ExperimentConfig, Preset};
use exact_core::data::{load_samples, read_mask, synth_dataset, write_mask, DatasetManifest, SitsSample, Split};
use exact_core::experiment::{run_ablation, score_masks};
use exact_core::metrics::EvalReport;
use exact_core::training::{classification_f1, evaluate_segmentation, pseudo_masks, train_classifier, train_segmentation, PseudoMode};

#[derive(Parser)]
#[command(name = "exact", version, about = "Weakly supervised segmentation of satellite image time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train and test splits.
    Synth(Common),
    /// Train the classifier and prototype bank.
    TrainCls {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Write pseudo masks for the train split and score them.
    Pseudo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Classifier checkpoint directory written by `train-cls`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::CbCam)]
        mode: ModeArg,
    },
    /// Train a segmenter on pseudo masks (or ground truth) and score it on the test split.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `pseudo`; ground-truth masks when omitted.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Score masks or a segmentation checkpoint against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        /// Directory holding `masks/<sample>.stsr`.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        pred: Option<PathBuf>,
        /// Segmentation checkpoint written by `train-seg`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the ablation grid and tabulate pseudo-label quality.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Render CAM, CB-CAM and mask panels and the class-to-time attention chart.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id in the train split; the first sample when omitted.
        #[arg(long)]
        sample: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults to the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Comma-separated: disable_cbl, disable_tap, disable_cbcam.
    #[arg(long)]
    ablation_flags: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "raw_cam")]
    RawCam,
    #[value(name = "cb_cam")]
    CbCam,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl Common {
    /// Effective configuration, echoed into the output directory.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::read(path)?,
            None => {
                let preset = match self.preset.unwrap_or(PresetArg::Desk) {
                    PresetArg::Desk => Preset::Desk,
                    PresetArg::Paper => Preset::Paper,
                };
                ExperimentConfig::preset(preset, self.seed.unwrap_or(0))
            }
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(flags) = &self.ablation_flags {
            cfg.ablation.apply_list(flags)?;
        }
        cfg.validate()?;
        cfg.echo_into(&self.out)?;
        Ok(cfg)
    }
}

fn split_dir(data: &Path, split: Split) -> PathBuf {
    data.join(split.as_str())
}

fn load_split(data: &Path, split: Split, cfg: &ExperimentConfig) -> Result<Vec<SitsSample>> {
    let dir = split_dir(data, split);
    let manifest = DatasetManifest::read(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if manifest.split != split {
        bail!("{} holds the {} split, expected {}", dir.display(), manifest.split.as_str(), split.as_str());
    }
    if manifest.num_classes != cfg.model.k {
        bail!("dataset has {} classes but the model expects {}", manifest.num_classes, cfg.model.k);
    }
    let samples = load_samples(&manifest)?;
    let m = &cfg.model;
    if let Some(s) = samples.iter().find(|s| s.series.dim() != (m.t, m.c, m.h, m.w)) {
        bail!("sample {} has shape {:?}, model expects {:?}", s.sample_id, s.series.dim(), (m.t, m.c, m.h, m.w));
    }
    Ok(samples)
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    fs::write(dir.join(format!("{stem}.txt")), report.to_text())?;
    fs::write(dir.join(format!("{stem}.kv")), report.to_key_values())?;
    Ok(())
}

fn mask_path(dir: &Path, sample_id: &str) -> PathBuf {
    dir.join("masks").join(format!("{sample_id}.stsr"))
}

fn read_masks(dir: &Path, samples: &[SitsSample]) -> Result<Vec<ndarray::Array2<u16>>> {
    samples
        .iter()
        .map(|s| {
            let p = mask_path(dir, &s.sample_id);
            read_mask(&p).with_context(|| format!("reading mask for {}", s.sample_id))
        })
        .collect()
}

fn synth(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    for (split, n) in [(Split::Train, cfg.data.n_train), (Split::Test, cfg.data.n_test)] {
        if n == 0 {
            continue;
        }
        let m = synth_dataset(&cfg.data.synth, n, split, cfg.data.min_frac, &split_dir(&common.out, split))?;
        eprintln!("{}: {} samples", split.as_str(), m.entries.len());
    }
    Ok(())
}

fn train_cls(common: &Common, data: &Path) -> Result<()> {
    let cfg = common.resolve()?;
    let train = load_split(data, Split::Train, &cfg)?;
    let start = Instant::now();
    let mut log = String::new();
    let run = train_classifier(&cfg, &train, |r| {
        log.push_str(&r.to_string());
        log.push('\n');
        if r.iter % 25 == 0 || r.iter + 1 == cfg.train.total_iters {
            eprintln!("{r}");
        }
    })?;
    fs::write(common.out.join("train_log.txt"), log)?;
    save_model(&common.out, "classifier", &cfg.model, &run.params)?;
    save_bank(&common.out.join(BANK_DIR), &run.bank)?;
    let f1 = classification_f1(&cfg, &run.params, &train)?;
    fs::write(common.out.join("summary.txt"), format!("train_f1 = {f1:.17e}\n"))?;
    eprintln!("trained in {:.1}s, train F1 {f1:.4}", start.elapsed().as_secs_f64());
    Ok(())
}

fn pseudo(common: &Common, data: &Path, checkpoint: &Path, mode: ModeArg) -> Result<()> {
    let cfg = common.resolve()?;
    let mut mode = match mode {
        ModeArg::RawCam => PseudoMode::RawCam,
        ModeArg::CbCam => PseudoMode::CbCam,
    };
    if cfg.ablation.disable_cbcam {
        mode = PseudoMode::RawCam;
    }
    let (model, params) = load_model(checkpoint, "classifier")?;
    if model != cfg.model {
        bail!("checkpoint model configuration differs from the effective configuration");
    }
    let bank = match mode {
        PseudoMode::CbCam => Some(load_bank(checkpoint)?),
        PseudoMode::RawCam => None,
    };
    let train = load_split(data, Split::Train, &cfg)?;
    let masks = pseudo_masks(&cfg, &params, bank.as_ref(), &train, mode)?;
    fs::create_dir_all(common.out.join("masks"))?;
    for (m, s) in masks.iter().zip(&train) {
        write_mask(&mask_path(&common.out, &s.sample_id), m)?;
    }
    let digest = directory_digest(checkpoint)?;
    fs::write(
        common.out.join("pseudo.txt"),
        format!(
            "mode = {}\ntheta_bg = {}\nmu_low = {}\nmu_high = {}\ncam_source = {:?}\ncheckpoint_sha256 = {digest}\nsamples = {}\n",
            mode.as_str(),
            cfg.cam.theta_bg,
            cfg.cam.mu_low,
            cfg.cam.mu_high,
            cfg.cam.source,
            masks.len()
        ),
    )?;
    let report = score_masks(&cfg, &masks, &train)?;
    write_report(&common.out, "report", &report)?;
    eprintln!("{} pseudo labels: mIoU {:.4}, OA {:.4}", mode.as_str(), report.miou, report.oa);
    Ok(())
}

fn train_seg(common: &Common, data: &Path, masks: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let train = load_split(data, Split::Train, &cfg)?;
    let test = load_split(data, Split::Test, &cfg)?;
    let labels = match masks {
        Some(dir) => read_masks(dir, &train)?,
        None => train.iter().map(|s| s.mask.clone()).collect(),
    };
    let run = train_segmentation(&cfg, &train, &labels)?;
    let log: String = run
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("iter={i} loss={l:e}\n"))
        .collect();
    fs::write(common.out.join("seg_log.txt"), log)?;
    save_model(&common.out, "segmenter", &cfg.model, &run.params)?;
    let (_, report) = evaluate_segmentation(&cfg, &run.params, &test)?;
    write_report(&common.out, "report", &report)?;
    eprintln!("test mIoU {:.4}, OA {:.4}", report.miou, report.oa);
    Ok(())
}

fn eval(common: &Common, data: &Path, split: SplitArg, pred: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let samples = load_split(data, split, &cfg)?;
    let report = match (pred, checkpoint) {
        (Some(dir), _) => score_masks(&cfg, &read_masks(dir, &samples)?, &samples)?,
        (None, Some(ckpt)) => {
            let (model, params) = load_model(ckpt, "segmenter")?;
            if model != cfg.model {
                bail!("checkpoint model configuration differs from the effective configuration");
            }
            evaluate_segmentation(&cfg, &params, &samples)?.1
        }
        (None, None) => bail!("either --pred or --checkpoint is required"),
    };
    write_report(&common.out, "report", &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn ablate(common: &Common, data: &Path) -> Result<()> {
    let cfg = common.resolve()?;
    let train = load_split(data, Split::Train, &cfg)?;
    let result = run_ablation(&cfg, &train, |m| eprintln!("{m}"))?;
    let table = result.to_table();
    fs::write(common.out.join("ablation.txt"), &table)?;
    let kv: String = result
        .rows
        .iter()
        .map(|r| format!("{}.miou = {:.17e}\n{}.oa = {:.17e}\n", r.name, r.report.miou, r.name, r.report.oa))
        .collect();
    fs::write(common.out.join("ablation.kv"), kv)?;
    print!("{table}");
    Ok(())
}

fn plot_cmd(common: &Common, data: &Path, checkpoint: &Path, sample: Option<&str>) -> Result<()> {
    let cfg = common.resolve()?;
    let (model, params) = load_model(checkpoint, "classifier")?;
    if model != cfg.model {
        bail!("checkpoint model configuration differs from the effective configuration");
    }
    let bank = load_bank(checkpoint).ok();
    let train = load_split(data, Split::Train, &cfg)?;
    let s = match sample {
        Some(id) => train.iter().find(|s| s.sample_id == id).with_context(|| format!("no sample '{id}'"))?,
        None => train.first().context("empty train split")?,
    };
    let files = plot::render(&cfg, &params, bank.as_ref(), s, &common.out)?;
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(c) => synth(c),
        Command::TrainCls { common, data } => train_cls(common, data),
        Command::Pseudo { common, data, checkpoint, mode } => pseudo(common, data, checkpoint, *mode),
        Command::TrainSeg { common, data, masks } => train_seg(common, data, masks.as_deref()),
        Command::Eval { common, data, split, pred, checkpoint } => {
            eval(common, data, *split, pred.as_deref(), checkpoint.as_deref())
        }
        Command::Ablate { common, data } => ablate(common, data),
        Command::Plot { common, data, checkpoint, sample } => plot_cmd(common, data, checkpoint, sample.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("EXACT_NUM_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: EXACT_NUM_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
