//! Clue-based contrastive loss between temporal dense embeddings and the
//! prototype bank.

use ndarray::{Array1, ArrayView1, Ix3, IxDyn};

use super::bank::{Polarity, PrototypeBank};
use crate::autograd::{Tensor, Var};
use crate::cam::Reliability;
use crate::error::{Error, Result};

/// `cos(z, p) / tau`.
pub fn similarity(z: ArrayView1<f64>, p: ArrayView1<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let nz = z.dot(&z).sqrt();
    let np = p.dot(&p).sqrt();
    if nz == 0.0 || np == 0.0 {
        return Err(Error::Numeric("similarity with a zero vector".into()));
    }
    Ok(z.dot(&p) / (nz * np * tau))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CblOptions {
    pub tau: f64,
    /// Adds the assigned prototype to the denominator (InfoNCE form).
    pub include_positive_in_denominator: bool,
}

impl Default for CblOptions {
    fn default() -> Self {
        CblOptions {
            tau: 0.1,
            include_positive_in_denominator: false,
        }
    }
}

pub struct CblOutput<'t> {
    pub loss: Var<'t>,
    /// Number of (position, class) pairs that contributed.
    pub participating: usize,
    pub skipped: bool,
}

/// Mean contrastive term over foreground (position, class) pairs of present
/// classes whose positive prototypes exist. Prototypes are constants.
///
/// For a pair the positive is the most similar positive prototype of that
/// class; the negatives are every other initialized prototype in the bank.
pub fn cbl_loss<'t>(
    z_t_dense: Var<'t>,
    filtered: &ndarray::Array2<Reliability>,
    bank: &PrototypeBank,
    image_labels: &[bool],
    opts: CblOptions,
) -> Result<CblOutput<'t>> {
    let value = z_t_dense.value();
    let z = value
        .view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Contract("cbl_loss expects z_t_dense of rank 3".into()))?;
    let (p, k, d) = z.dim();
    if filtered.dim() != (p, k) || image_labels.len() != k || bank.num_classes() != k || bank.dim() != d {
        return Err(Error::Contract(format!(
            "cbl_loss shapes disagree: z [{p}, {k}, {d}], filtered {:?}, labels {}, bank {}x{}",
            filtered.dim(),
            image_labels.len(),
            bank.num_classes(),
            bank.dim()
        )));
    }
    if !(opts.tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {}", opts.tau)));
    }

    // Every initialized prototype, tagged with (class, polarity, index).
    let mut all: Vec<((usize, Polarity, usize), Array1<f64>)> = Vec::new();
    for c in 0..k {
        for pol in [Polarity::Positive, Polarity::Negative] {
            for (i, row) in bank.active(c, pol) {
                all.push(((c, pol, i), row.to_owned()));
            }
        }
    }

    let mut grad = Tensor::zeros(IxDyn(&[p, k, d]));
    let mut total = 0.0;
    let mut count = 0usize;
    let mut sims = vec![0.0; all.len()];
    for c in 0..k {
        if !image_labels[c] || !bank.any_initialized(c, Polarity::Positive) {
            continue;
        }
        for i in 0..p {
            if filtered[[i, c]] != Reliability::Foreground {
                continue;
            }
            let zi = z.slice(ndarray::s![i, c, ..]);
            let norm = zi.dot(&zi).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "degenerate embedding at position {i} for class {}",
                    c + 1
                )));
            }
            let zhat = &zi / norm;
            for (s, (_, proto)) in sims.iter_mut().zip(&all) {
                *s = zhat.dot(proto) / opts.tau;
            }
            let pos = all
                .iter()
                .enumerate()
                .filter(|(_, ((cc, pol, _), _))| *cc == c && *pol == Polarity::Positive)
                .max_by(|a, b| sims[a.0].total_cmp(&sims[b.0]).then(b.0.cmp(&a.0)))
                .map(|(j, _)| j)
                .expect("class has an initialized positive prototype");
            let denom: Vec<usize> = (0..all.len())
                .filter(|&j| j != pos || opts.include_positive_in_denominator)
                .collect();
            if denom.is_empty() {
                continue;
            }
            let m = denom.iter().map(|&j| sims[j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + denom.iter().map(|&j| (sims[j] - m).exp()).sum::<f64>().ln();
            total += lse - sims[pos];
            count += 1;

            // d S_j / d z = (p_j - cos_j * zhat) / (tau * |z|)
            let mut dir = Array1::<f64>::zeros(d);
            for &j in &denom {
                let w = (sims[j] - lse).exp();
                dir.scaled_add(w, &all[j].1);
            }
            dir.scaled_add(-1.0, &all[pos].1);
            let radial = dir.dot(&zhat);
            let g = (&dir - &(&zhat * radial)) / (opts.tau * norm);
            grad.slice_mut(ndarray::s![i, c, ..]).assign(&g);
        }
    }
    if count == 0 {
        let loss = z_t_dense.tape().scalar_fn(z_t_dense, 0.0, grad);
        return Ok(CblOutput {
            loss,
            participating: 0,
            skipped: true,
        });
    }
    let n = count as f64;
    grad.mapv_inplace(|g| g / n);
    let loss = z_t_dense.tape().scalar_fn(z_t_dense, total / n, grad);
    Ok(CblOutput {
        loss,
        participating: count,
        skipped: false,
    })
}
