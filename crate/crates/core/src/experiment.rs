//! Multi-run experiments: the ablation grid and the supervision-ratio
//! comparison.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::config::ExperimentConfig;
use crate::data::SitsSample;
use crate::error::Result;
use crate::metrics::{supervision_ratio, Confusion, EvalReport};
use crate::training::{evaluate_segmentation, pseudo_masks, train_classifier, train_segmentation, ClassifierRun, PseudoMode};

/// Scores masks against the samples' ground truth.
pub fn score_masks(cfg: &ExperimentConfig, masks: &[Array2<u16>], samples: &[SitsSample]) -> Result<EvalReport> {
    let mut conf = Confusion::new(cfg.model.k + 1);
    for (m, s) in masks.iter().zip(samples) {
        conf.accumulate(m.view(), s.mask.view())?;
    }
    conf.finalize(cfg.eval.include_background)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub train_cbl: bool,
    pub train_tap: bool,
    pub mode: PseudoMode,
    pub report: EvalReport,
}

pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// Model trained with both extra terms; reused by later stages.
    pub full_run: ClassifierRun,
    pub baseline_run: ClassifierRun,
}

impl Ablation {
    pub fn to_table(&self) -> String {
        let mut s = String::from("row        cbl  tap  pseudo   miou    oa\n");
        for r in &self.rows {
            let tick = |b: bool| if b { "x" } else { "-" };
            writeln!(
                s,
                "{:<9}  {:<3}  {:<3}  {:<7}  {:.4}  {:.4}",
                r.name,
                tick(r.train_cbl),
                tick(r.train_tap),
                r.mode.as_str(),
                r.report.miou,
                r.report.oa
            )
            .unwrap();
        }
        s
    }
}

/// Trains the three classifier variants and scores the train-split pseudo
/// labels of each row: baseline, +tap, +cbl+tap (raw CAMs) and full
/// (CB-CAMs of the +cbl+tap model).
pub fn run_ablation(cfg: &ExperimentConfig, train: &[SitsSample], mut progress: impl FnMut(&str)) -> Result<Ablation> {
    let variant = |cbl: bool, tap: bool| {
        let mut c = cfg.clone();
        c.ablation.disable_cbl = !cbl;
        c.ablation.disable_tap = !tap;
        c
    };
    let mut rows = Vec::new();
    let mut keep = Vec::new();
    for (name, cbl, tap) in [("baseline", false, false), ("+tap", false, true), ("+cbl+tap", true, true)] {
        progress(&format!("training {name}"));
        let c = variant(cbl, tap);
        let run = train_classifier(&c, train, |_| {})?;
        let masks = pseudo_masks(&c, &run.params, None, train, PseudoMode::RawCam)?;
        rows.push(AblationRow {
            name,
            train_cbl: cbl,
            train_tap: tap,
            mode: PseudoMode::RawCam,
            report: score_masks(&c, &masks, train)?,
        });
        keep.push(run);
    }
    let full_run = keep.pop().unwrap();
    let c = variant(true, true);
    let masks = pseudo_masks(&c, &full_run.params, Some(&full_run.bank), train, PseudoMode::CbCam)?;
    rows.push(AblationRow {
        name: "full",
        train_cbl: true,
        train_tap: true,
        mode: PseudoMode::CbCam,
        report: score_masks(&c, &masks, train)?,
    });
    let baseline_run = keep.swap_remove(0);
    Ok(Ablation {
        rows,
        full_run,
        baseline_run,
    })
}

#[derive(Debug, Clone)]
pub struct RatioOutcome {
    pub full: EvalReport,
    pub exact: EvalReport,
    pub raw: EvalReport,
    pub exact_ratio: f64,
    pub raw_ratio: f64,
}

impl RatioOutcome {
    pub fn to_table(&self) -> String {
        format!(
            "supervision  test_miou  ratio\nground_truth {:.4}     1.0000\nexact        {:.4}     {:.4}\nraw_cam      {:.4}     {:.4}\n",
            self.full.miou, self.exact.miou, self.exact_ratio, self.raw.miou, self.raw_ratio
        )
    }
}

/// Segmenters trained on ground truth, on CB-CAM pseudo labels of the full
/// model and on raw-CAM pseudo labels of the baseline model, all scored on
/// the test split.
pub fn run_supervision_ratio(
    cfg: &ExperimentConfig,
    train: &[SitsSample],
    test: &[SitsSample],
    exact_masks: &[Array2<u16>],
    raw_masks: &[Array2<u16>],
    mut progress: impl FnMut(&str),
) -> Result<RatioOutcome> {
    let gt: Vec<Array2<u16>> = train.iter().map(|s| s.mask.clone()).collect();
    let mut eval = |name: &str, masks: &[Array2<u16>]| -> Result<EvalReport> {
        progress(&format!("segmentation on {name}"));
        let run = train_segmentation(cfg, train, masks)?;
        Ok(evaluate_segmentation(cfg, &run.params, test)?.1)
    };
    let full = eval("ground truth", &gt)?;
    let exact = eval("exact pseudo labels", exact_masks)?;
    let raw = eval("raw-cam pseudo labels", raw_masks)?;
    Ok(RatioOutcome {
        exact_ratio: supervision_ratio(exact.miou, full.miou)?,
        raw_ratio: supervision_ratio(raw.miou, full.miou)?,
        full,
        exact,
        raw,
    })
}
