use std::time::Instant;

use exact_core::clues::{l2_normalize_rows, sinkhorn_assign, SinkhornParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::oracle::polytope_oracle;
use crate::{within_budget, Outcome};

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    l2_normalize_rows(&Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal)))
}

/// Marginal deviations recomputed here rather than trusted from the solver.
fn residual(c: &Array2<f64>) -> f64 {
    let (np, nk) = c.dim();
    let rows = c.rows().into_iter().map(|r| (r.sum() - 1.0 / np as f64).abs());
    let cols = c.columns().into_iter().map(|col| (col.sum() - 1.0 / nk as f64).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

pub fn criterion() -> Outcome {
    let start = Instant::now();
    let params = SinkhornParams {
        eta: 0.05,
        max_iters: 50,
        tol: 1e-4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    let mut max_iters = 0;
    let mut failures = Vec::new();
    for i in 0..200 {
        let np = [1, 2, 4][i % 3];
        let nk = rng.random_range(2..=64);
        let d = rng.random_range(4..=32);
        let p = unit_rows(&mut rng, np, d);
        let z = unit_rows(&mut rng, nk, d);
        match sinkhorn_assign(&p, &z, params) {
            Ok(Some(a)) => {
                let r = residual(&a.c);
                worst = worst.max(r);
                max_iters = max_iters.max(a.iterations);
                if r > 1e-4 || a.iterations > 50 || a.c.iter().any(|&v| !(v >= 0.0)) {
                    failures.push(format!("instance {i} (Np={np}, Nk={nk}): residual {r:.2e}"));
                }
            }
            other => failures.push(format!("instance {i}: {:?}", other.err())),
        }
    }

    let mut worst_gap = 0.0f64;
    for trial in 0..20 {
        let p = unit_rows(&mut rng, 2, 8);
        let z = unit_rows(&mut rng, 3, 8);
        let c = match sinkhorn_assign(&p, &z, params) {
            Ok(Some(a)) => a.c,
            other => {
                failures.push(format!("oracle trial {trial}: {:?}", other.err()));
                continue;
            }
        };
        let reference = polytope_oracle(&p.dot(&z.t()), params.eta);
        let gap = c.iter().zip(reference.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_gap = worst_gap.max(gap);
        if gap > 1e-3 {
            failures.push(format!("oracle trial {trial}: gap {gap:.2e}"));
        }
    }

    let elapsed = start.elapsed();
    if !within_budget(elapsed, 10) {
        failures.push(format!("runtime {:.1}s exceeds 10s", elapsed.as_secs_f64()));
    }
    let summary = format!(
        "200 instances, worst residual {worst:.2e}, max iterations {max_iters}; 20 oracle trials, worst gap {worst_gap:.2e}"
    );
    if failures.is_empty() {
        Outcome::new(true, summary)
    } else {
        Outcome::new(false, format!("{summary}; {}", failures.join("; ")))
    }
}
