//! Direct maximizer of the entropic transport objective on the 2 x 3
//! polytope, independent of any scaling iteration.

use ndarray::Array2;

const R: f64 = 1.0 / 3.0;

/// Golden-section search for the maximizer of a concave `f` on `[lo, hi]`.
fn golden_max(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..120 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn plan(x0: f64, x1: f64) -> [[f64; 3]; 2] {
    let x = [x0, x1, 0.5 - x0 - x1];
    [x, [R - x[0], R - x[1], R - x[2]]]
}

fn objective(s: &Array2<f64>, eta: f64, c: &[[f64; 3]; 2]) -> f64 {
    let mut total = 0.0;
    for (i, row) in c.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let v = v.max(0.0);
            total += v * s[[i, j]] - if v > 0.0 { eta * v * v.ln() } else { 0.0 };
        }
    }
    total
}

/// Maximizes `<C, S> - eta * sum C log C` with row sums 1/2 and column sums
/// 1/3. The plan is fixed by two entries of its first row; the objective is
/// jointly concave in them, so the inner maximum is concave in the outer
/// variable and nested golden-section search converges.
pub fn polytope_oracle(s: &Array2<f64>, eta: f64) -> Array2<f64> {
    let inner_range = |x0: f64| ((0.5 - x0 - R).max(0.0), R.min(0.5 - x0));
    let best_x1 = |x0: f64| {
        let (lo, hi) = inner_range(x0);
        golden_max(lo, hi, |x1| objective(s, eta, &plan(x0, x1)))
    };
    let x0 = golden_max(0.0, R, |x0| objective(s, eta, &plan(x0, best_x1(x0))));
    let c = plan(x0, best_x1(x0));
    Array2::from_shape_fn((2, 3), |(i, j)| c[i][j])
}
