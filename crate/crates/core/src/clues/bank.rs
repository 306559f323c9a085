//! Class-wise positive and negative prototype banks with momentum updates.

use ndarray::{Array1, Array2, ArrayView1, Axis, IxDyn};

use super::sinkhorn::{l2_normalize_rows, sinkhorn_assign, AssignmentMatrix, SinkhornParams};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    k: usize,
    np: usize,
    d: usize,
    pub alpha: f64,
    pub tau: f64,
    positive: Vec<Array2<f64>>,
    negative: Vec<Array2<f64>>,
    pos_init: Vec<Vec<bool>>,
    neg_init: Vec<Vec<bool>>,
}

/// Pre-normalization momentum step `alpha * p + (1 - alpha) * mean`.
pub fn momentum_step(p: ArrayView1<f64>, weighted_mean: ArrayView1<f64>, alpha: f64) -> Array1<f64> {
    &p * alpha + &weighted_mean * (1.0 - alpha)
}

fn normalize(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v.mapv_inplace(|x| x / n);
    }
    v
}

impl PrototypeBank {
    pub fn new(k: usize, np: usize, d: usize, alpha: f64, tau: f64) -> Result<Self> {
        if np == 0 || k == 0 || d == 0 {
            return Err(Error::Config(format!(
                "prototype bank needs k, np, d >= 1 (got {k}, {np}, {d})"
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("momentum alpha must be in [0, 1], got {alpha}")));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        Ok(PrototypeBank {
            k,
            np,
            d,
            alpha,
            tau,
            positive: vec![Array2::zeros((np, d)); k],
            negative: vec![Array2::zeros((np, d)); k],
            pos_init: vec![vec![false; np]; k],
            neg_init: vec![vec![false; np]; k],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn num_prototypes(&self) -> usize {
        self.np
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn prototypes(&self, class: usize, polarity: Polarity) -> &Array2<f64> {
        match polarity {
            Polarity::Positive => &self.positive[class],
            Polarity::Negative => &self.negative[class],
        }
    }

    pub fn initialized(&self, class: usize, polarity: Polarity) -> &[bool] {
        match polarity {
            Polarity::Positive => &self.pos_init[class],
            Polarity::Negative => &self.neg_init[class],
        }
    }

    /// Initialized prototypes of one class and polarity.
    pub fn active(&self, class: usize, polarity: Polarity) -> impl Iterator<Item = (usize, ArrayView1<'_, f64>)> {
        let flags = self.initialized(class, polarity);
        self.prototypes(class, polarity)
            .rows()
            .into_iter()
            .enumerate()
            .filter(move |(i, _)| flags[*i])
    }

    pub fn any_initialized(&self, class: usize, polarity: Polarity) -> bool {
        self.initialized(class, polarity).iter().any(|&f| f)
    }

    fn slot_mut(&mut self, class: usize, polarity: Polarity) -> (&mut Array2<f64>, &mut Vec<bool>) {
        match polarity {
            Polarity::Positive => (&mut self.positive[class], &mut self.pos_init[class]),
            Polarity::Negative => (&mut self.negative[class], &mut self.neg_init[class]),
        }
    }

    /// Applies one momentum update from an assignment of `z` (rows already
    /// unit-norm) to the prototypes of `(class, polarity)`.
    pub fn momentum_update(
        &mut self,
        class: usize,
        polarity: Polarity,
        assignment: &AssignmentMatrix,
        z: &Array2<f64>,
    ) -> Result<()> {
        self.check_class(class)?;
        let c = &assignment.c;
        if c.dim() != (self.np, z.nrows()) || z.ncols() != self.d {
            return Err(Error::Contract(format!(
                "assignment {:?} and embeddings {:?} do not fit a bank of {} x {}",
                c.dim(),
                z.dim(),
                self.np,
                self.d
            )));
        }
        let alpha = self.alpha;
        let (protos, flags) = self.slot_mut(class, polarity);
        for n in 0..c.nrows() {
            let row = c.row(n);
            let mass = row.sum();
            if !(mass > 0.0) {
                continue;
            }
            let mean = row.dot(z) / mass;
            let a = if flags[n] { alpha } else { 0.0 };
            let updated = normalize(momentum_step(protos.row(n), mean.view(), a));
            protos.row_mut(n).assign(&updated);
            flags[n] = true;
        }
        Ok(())
    }

    /// Clusters `embeddings` `[Nk, d]` onto `(class, polarity)` and updates the
    /// prototypes. Uninitialized prototypes are first seeded by farthest-point
    /// selection so that the assignment has distinct targets. Returns the
    /// assignment, or `None` when there was nothing to cluster.
    pub fn update(
        &mut self,
        class: usize,
        polarity: Polarity,
        embeddings: &Array2<f64>,
        sinkhorn: SinkhornParams,
    ) -> Result<Option<AssignmentMatrix>> {
        self.check_class(class)?;
        if embeddings.nrows() == 0 {
            return Ok(None);
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite embeddings for class {} ({})",
                class + 1,
                polarity.as_str()
            )));
        }
        let z = l2_normalize_rows(embeddings);
        let np = self.np;
        {
            let (protos, flags) = self.slot_mut(class, polarity);
            if flags.iter().any(|f| !f) {
                let seeds = farthest_points(&z, np);
                for (n, &s) in seeds.iter().enumerate() {
                    if !flags[n] {
                        protos.row_mut(n).assign(&z.row(s));
                    }
                }
            }
        }
        let assignment = sinkhorn_assign(self.prototypes(class, polarity), &z, sinkhorn)?;
        if let Some(a) = &assignment {
            self.momentum_update(class, polarity, a, &z)?;
        }
        Ok(assignment)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.k {
            return Err(Error::Contract(format!(
                "class index {class} out of range for a bank of {} classes",
                self.k
            )));
        }
        Ok(())
    }

    /// Named tensors for checkpointing: `positive.{k}`, `negative.{k}`,
    /// matching `*.init` flag vectors and a `scalars` triple `(alpha, np, tau)`.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let flags = |f: &[bool]| {
            Tensor::from_shape_vec(IxDyn(&[f.len()]), f.iter().map(|&b| b as u8 as f64).collect()).unwrap()
        };
        for c in 0..self.k {
            out.push((format!("positive.{c}"), self.positive[c].clone().into_dyn()));
            out.push((format!("positive.{c}.init"), flags(&self.pos_init[c])));
            out.push((format!("negative.{c}"), self.negative[c].clone().into_dyn()));
            out.push((format!("negative.{c}.init"), flags(&self.neg_init[c])));
        }
        out.push((
            "scalars".to_string(),
            Tensor::from_shape_vec(IxDyn(&[3]), vec![self.alpha, self.np as f64, self.tau]).unwrap(),
        ));
        out
    }

    pub fn from_named(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("prototype bank is missing tensor '{name}'")))
        };
        let scalars = find("scalars")?;
        if scalars.len() != 3 {
            return Err(Error::Data("prototype bank scalars must hold (alpha, np, tau)".into()));
        }
        let alpha = scalars[[0]];
        let np = scalars[[1]] as usize;
        let tau = scalars[[2]];
        let k = entries
            .iter()
            .filter(|(n, _)| n.starts_with("positive.") && !n.ends_with(".init"))
            .count();
        let first = find("positive.0")?;
        let d = first.shape().get(1).copied().unwrap_or(0);
        let mut bank = PrototypeBank::new(k, np, d, alpha, tau)?;
        for c in 0..k {
            for pol in [Polarity::Positive, Polarity::Negative] {
                let name = format!("{}.{c}", pol.as_str());
                let m = find(&name)?
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|_| Error::Data(format!("bank tensor '{name}' is not a matrix")))?;
                if m.dim() != (np, d) {
                    return Err(Error::Data(format!(
                        "bank tensor '{name}' has shape {:?}, expected ({np}, {d})",
                        m.dim()
                    )));
                }
                let f = find(&format!("{name}.init"))?;
                if f.len() != np {
                    return Err(Error::Data(format!("bank flags '{name}.init' have the wrong length")));
                }
                let (protos, flags) = bank.slot_mut(c, pol);
                *protos = m;
                for (dst, &v) in flags.iter_mut().zip(f.iter()) {
                    *dst = v != 0.0;
                }
            }
        }
        Ok(bank)
    }
}

/// Indices of `n` spread-out rows of unit-norm `z`: start from the row most
/// aligned with the mean direction, then repeatedly take the row with the
/// lowest best-similarity to those chosen. Repeats when `z` has fewer rows.
pub fn farthest_points(z: &Array2<f64>, n: usize) -> Vec<usize> {
    let rows = z.nrows();
    if rows == 0 {
        return Vec::new();
    }
    let mean = z.mean_axis(Axis(0)).unwrap();
    let scores = z.dot(&mean);
    let start = argmax(scores.iter().copied());
    let mut chosen = vec![start];
    let mut best_sim = z.dot(&z.row(start));
    while chosen.len() < n {
        if chosen.len() >= rows {
            chosen.push(chosen[chosen.len() % rows]);
            continue;
        }
        let next = argmax(best_sim.iter().map(|&s| -s));
        chosen.push(next);
        let s = z.dot(&z.row(next));
        best_sim.zip_mut_with(&s, |a, &b| *a = a.max(b));
    }
    chosen
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
