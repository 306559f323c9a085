//! Confusion-matrix evaluation: OA, IoU, recall, precision, FDR and the
//! weak-to-full supervision ratio.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Pixel confusion counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    counts: Array2<u64>,
}

impl Confusion {
    /// `num_labels` = K + 1 (background included).
    pub fn new(num_labels: usize) -> Self {
        Confusion {
            counts: Array2::zeros((num_labels, num_labels)),
        }
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != counts.ncols() {
            return Err(Error::Contract(format!("confusion matrix {:?} is not square", counts.dim())));
        }
        Ok(Confusion { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accumulate(&mut self, pred: ArrayView2<u16>, gt: ArrayView2<u16>) -> Result<()> {
        self.accumulate_pixels(pred.iter().copied(), gt.iter().copied(), pred.dim() == gt.dim())
    }

    pub fn accumulate_slices(&mut self, pred: &[u16], gt: &[u16]) -> Result<()> {
        self.accumulate_pixels(pred.iter().copied(), gt.iter().copied(), pred.len() == gt.len())
    }

    fn accumulate_pixels(
        &mut self,
        pred: impl Iterator<Item = u16>,
        gt: impl Iterator<Item = u16>,
        same_shape: bool,
    ) -> Result<()> {
        if !same_shape {
            return Err(Error::Contract("prediction and ground truth differ in shape".into()));
        }
        let n = self.counts.nrows();
        let mut update = self.counts.clone();
        for (p, g) in pred.zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(Error::Contract(format!(
                    "label {} outside 0..{n}",
                    p.max(g)
                )));
            }
            update[[g, p]] += 1;
        }
        self.counts = update;
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if self.counts.dim() != other.counts.dim() {
            return Err(Error::Contract("cannot merge confusion matrices of different sizes".into()));
        }
        self.counts += &other.counts;
        Ok(())
    }

    pub fn finalize(&self, include_background: bool) -> Result<EvalReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Evaluation("confusion matrix is empty".into()));
        }
        let n = self.counts.nrows();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut report = EvalReport {
            confusion: self.counts.clone(),
            oa: 0.0,
            miou: 0.0,
            include_background,
            recall: vec![0.0; n],
            precision: vec![0.0; n],
            iou: vec![0.0; n],
            fdr: vec![0.0; n],
            iou_defined: vec![false; n],
        };
        let mut trace = 0;
        let (mut iou_sum, mut iou_count) = (0.0, 0usize);
        for k in 0..n {
            let tp = self.counts[[k, k]];
            let fn_ = self.counts.row(k).sum() - tp;
            let fp = self.counts.column(k).sum() - tp;
            trace += tp;
            report.recall[k] = ratio(tp, tp + fn_);
            report.precision[k] = ratio(tp, tp + fp);
            report.fdr[k] = ratio(fp, tp + fp);
            let denom = tp + fp + fn_;
            report.iou[k] = ratio(tp, denom);
            report.iou_defined[k] = denom > 0;
            if denom > 0 && (k > 0 || include_background) {
                iou_sum += report.iou[k];
                iou_count += 1;
            }
        }
        report.oa = trace as f64 / total as f64;
        report.miou = if iou_count == 0 { 0.0 } else { iou_sum / iou_count as f64 };
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: Array2<u64>,
    pub oa: f64,
    pub miou: f64,
    pub include_background: bool,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub iou: Vec<f64>,
    pub fdr: Vec<f64>,
    /// Whether class `k` occurred in ground truth or prediction.
    pub iou_defined: Vec<bool>,
}

impl EvalReport {
    /// Human-readable report, one metric per line plus a per-class table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "oa {:.4}", self.oa).unwrap();
        writeln!(s, "miou {:.4}", self.miou).unwrap();
        writeln!(s, "miou_includes_background {}", self.include_background).unwrap();
        writeln!(s, "pixels {}", self.confusion.sum()).unwrap();
        writeln!(s, "class  iou     recall  precision  fdr").unwrap();
        for k in 0..self.iou.len() {
            writeln!(
                s,
                "{k:<5}  {:.4}  {:.4}  {:.4}     {:.4}",
                self.iou[k], self.recall[k], self.precision[k], self.fdr[k]
            )
            .unwrap();
        }
        s
    }

    /// Machine-readable `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        writeln!(s, "oa = {:.17e}", self.oa).unwrap();
        writeln!(s, "miou = {:.17e}", self.miou).unwrap();
        writeln!(s, "include_background = {}", self.include_background).unwrap();
        for k in 0..self.iou.len() {
            writeln!(s, "iou.{k} = {:.17e}", self.iou[k]).unwrap();
            writeln!(s, "recall.{k} = {:.17e}", self.recall[k]).unwrap();
            writeln!(s, "precision.{k} = {:.17e}", self.precision[k]).unwrap();
            writeln!(s, "fdr.{k} = {:.17e}", self.fdr[k]).unwrap();
        }
        for (g, row) in self.confusion.rows().into_iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(s, "confusion.{g} = {}", cells.join(",")).unwrap();
        }
        s
    }
}

pub fn supervision_ratio(weak_miou: f64, full_miou: f64) -> Result<f64> {
    if !(full_miou > 0.0) {
        return Err(Error::Evaluation(format!(
            "supervision ratio undefined for fully supervised mIoU {full_miou}"
        )));
    }
    Ok(weak_miou / full_miou)
}
