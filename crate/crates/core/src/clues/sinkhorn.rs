//! Entropic optimal-transport assignment of embeddings to prototypes.
//!
//! Solves
//!
//! ```text
//! maximize  <C, P Z^T> - eta * sum C log C
//! s.t.      C 1 = u,  C^T 1 = r,  C >= 0
//! ```
//!
//! with uniform marginals `u = 1/Np` and `r = 1/Nk`. The optimum has the form
//! `C = diag(a) exp(P Z^T / eta) diag(b)`; the scalings are found in the
//! log domain.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub eta: f64,
    pub max_iters: usize,
    /// Early stop once both marginal residuals fall to this level.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            eta: 0.05,
            max_iters: 50,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    /// `[Np, Nk]`
    pub c: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    /// Largest absolute deviation of row or column sums from the marginals.
    pub residual: f64,
    pub iterations: usize,
}

pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// Assigns `embeddings` `[Nk, d]` to `prototypes` `[Np, d]`.
///
/// Returns `Ok(None)` when there is nothing to assign (`Nk = 0`); the caller
/// skips that class for the batch.
pub fn sinkhorn_assign(
    prototypes: &Array2<f64>,
    embeddings: &Array2<f64>,
    params: SinkhornParams,
) -> Result<Option<AssignmentMatrix>> {
    let (np, d) = prototypes.dim();
    let nk = embeddings.nrows();
    if nk == 0 {
        return Ok(None);
    }
    if np == 0 {
        return Err(Error::Contract("sinkhorn needs at least one prototype".into()));
    }
    if embeddings.ncols() != d {
        return Err(Error::Contract(format!(
            "prototype width {d} differs from embedding width {}",
            embeddings.ncols()
        )));
    }
    if !(params.eta > 0.0) {
        return Err(Error::Config(format!("eta must be positive, got {}", params.eta)));
    }
    let p = l2_normalize_rows(prototypes);
    let z = l2_normalize_rows(embeddings);
    let scores = p.dot(&z.t()) / params.eta;
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite prototype similarities".into()));
    }
    Ok(Some(sinkhorn_from_scores(&scores, params)))
}

/// Scaling iterations on precomputed log-kernel `scores = P Z^T / eta`.
///
/// Each iteration normalizes the columns exactly and then moves the row
/// scalings by a damped Newton step on the dual objective, where plain
/// alternating normalization would take a single fixed-point step. The
/// fixed point and the `diag(a) K diag(b)` form are the same; plain
/// alternation can need thousands of iterations when eta is small.
pub fn sinkhorn_from_scores(scores: &Array2<f64>, params: SinkhornParams) -> AssignmentMatrix {
    let (np, nk) = scores.dim();
    let u = 1.0 / np as f64;
    let r = 1.0 / nk as f64;
    let mut f = Array1::<f64>::zeros(np);
    let mut iterations = 0;
    let max_iters = params.max_iters.max(1);
    let (mut c, mut residual);
    loop {
        iterations += 1;
        let (dual, pi) = column_softmax(scores, &f);
        c = pi.mapv(|v| v * r);
        residual = marginal_residual(&c, u, r);
        if residual <= params.tol || iterations >= max_iters || np == 1 {
            break;
        }
        f = newton_row_step(scores, &f, dual, &pi);
    }
    AssignmentMatrix {
        c,
        row_marginal: Array1::from_elem(np, u),
        col_marginal: Array1::from_elem(nk, r),
        residual,
        iterations,
    }
}

/// Column-normalized plan shape `pi[i, j] = softmax_i(scores[i, j] + f[i])`
/// and the dual value `u . f - r * sum_j logsumexp_i(scores[i, j] + f[i])`.
fn column_softmax(scores: &Array2<f64>, f: &Array1<f64>) -> (f64, Array2<f64>) {
    let (np, nk) = scores.dim();
    let mut dual = f.sum() / np as f64;
    let mut pi = Array2::<f64>::zeros((np, nk));
    for j in 0..nk {
        let l = logsumexp((0..np).map(|i| scores[[i, j]] + f[i]));
        dual -= l / nk as f64;
        for i in 0..np {
            pi[[i, j]] = (scores[[i, j]] + f[i] - l).exp();
        }
    }
    (dual, pi)
}

/// Largest log-scale change of a single Newton step.
const MAX_STEP: f64 = 20.0;

/// One damped Newton ascent step on the (concave) dual in the row scalings.
/// `f[0]` is pinned since the dual is invariant to a common shift.
fn newton_row_step(scores: &Array2<f64>, f: &Array1<f64>, dual: f64, pi: &Array2<f64>) -> Array1<f64> {
    let (np, nk) = pi.dim();
    let m = np - 1;
    let r = 1.0 / nk as f64;
    let u = 1.0 / np as f64;
    let grad: Vec<f64> = (1..np).map(|i| u - r * pi.row(i).sum()).collect();
    let mut hess = Array2::<f64>::zeros((m, m));
    for j in 0..nk {
        for p in 1..np {
            for q in 1..np {
                let diag = if p == q { pi[[p, j]] } else { 0.0 };
                hess[[p - 1, q - 1]] += r * (diag - pi[[p, j]] * pi[[q, j]]);
            }
        }
    }
    let mut step = solve_psd(hess, &grad).unwrap_or_else(|| grad.clone());
    let largest = step.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if largest > MAX_STEP {
        step.iter_mut().for_each(|v| *v *= MAX_STEP / largest);
    }
    let slope: f64 = grad.iter().zip(&step).map(|(g, d)| g * d).sum();
    let mut t = 1.0;
    loop {
        let mut next = f.clone();
        for p in 1..np {
            next[p] += t * step[p - 1];
        }
        if t < 1e-12 || column_softmax(scores, &next).0 >= dual + 1e-4 * t * slope {
            return next;
        }
        t *= 0.5;
    }
}

/// Solves `a x = b` for symmetric positive semi-definite `a` by Cholesky
/// with a small relative ridge. `None` if the factorization breaks down.
fn solve_psd(mut a: Array2<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let ridge = 1e-12 * (0..n).map(|i| a[[i, i]]).fold(0.0, f64::max).max(1e-300);
    for i in 0..n {
        a[[i, i]] += ridge;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[[i, k]] * y[k]).sum::<f64>()) / l[[i, i]];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[[k, i]] * x[k]).sum::<f64>()) / l[[i, i]];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn marginal_residual(c: &Array2<f64>, u: f64, r: f64) -> f64 {
    let rows = c.rows().into_iter().map(|row| (row.sum() - u).abs());
    let cols = c.columns().into_iter().map(|col| (col.sum() - r).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}
