//! Reference computations that share no code path with the library kernels.

use std::f64::consts::PI;

/// `ω₀ + 2Σ(1 − cos 2πkʲ)`.
pub fn next_nearest(omega0: f64, k: [f64; 3]) -> f64 {
    omega0 + k.iter().map(|x| 2.0 - 2.0 * (2.0 * PI * x).cos()).sum::<f64>()
}

/// `(ω₀² + 2Σ(1 − cos 2πkʲ))^½`.
pub fn nearest(omega0: f64, k: [f64; 3]) -> f64 {
    (omega0 * omega0 + k.iter().map(|x| 2.0 - 2.0 * (2.0 * PI * x).cos()).sum::<f64>()).sqrt()
}

fn gauss(x: f64, eta: f64) -> f64 {
    (-0.5 * (x / eta).powi(2)).exp() / (eta * (2.0 * PI).sqrt())
}

/// Three-phonon collision term by direct summation over `(k, k₁)` for every
/// `k`, merging and splitting written in product form. Grid points are
/// `(n₁, n₂, n₃)/N` in row-major order; pairs with `|E| > cutoff·η` are dropped.
#[allow(clippy::too_many_arguments)]
pub fn direct_collision(
    omega: impl Fn([f64; 3]) -> f64,
    n: usize,
    eta: f64,
    cutoff: f64,
    gamma: f64,
    w: &[f64],
    quantum: bool,
) -> Vec<f64> {
    let pts: Vec<[usize; 3]> = (0..n * n * n).map(|i| [i / (n * n), (i / n) % n, i % n]).collect();
    let at = |c: [usize; 3]| (c[0] * n + c[1]) * n + c[2];
    let om: Vec<f64> = pts.iter().map(|c| omega(c.map(|x| x as f64 / n as f64))).collect();
    let t = |x: f64| if quantum { 1.0 + x } else { x };
    let mut out = vec![0.0; pts.len()];
    for (k, ck) in pts.iter().enumerate() {
        let mut s = 0.0;
        for (k1, c1) in pts.iter().enumerate() {
            let k2 = at([0, 1, 2].map(|d| (ck[d] + c1[d]) % n));
            let e = om[k] + om[k1] - om[k2];
            if e.abs() <= cutoff * eta {
                let rate = 2.0 * gauss(e, eta) / (om[k] * om[k1] * om[k2]);
                let bracket = if quantum {
                    t(w[k]) * t(w[k1]) * w[k2] - w[k] * w[k1] * t(w[k2])
                } else {
                    w[k1] * w[k2] + w[k] * w[k2] - w[k] * w[k1]
                };
                s += rate * bracket;
            }
            let k2 = at([0, 1, 2].map(|d| (ck[d] + n - c1[d]) % n));
            let e = om[k1] + om[k2] - om[k];
            if e.abs() <= cutoff * eta {
                let rate = gauss(e, eta) / (om[k] * om[k1] * om[k2]);
                let bracket = if quantum {
                    w[k1] * w[k2] * t(w[k]) - t(w[k1]) * t(w[k2]) * w[k]
                } else {
                    w[k1] * w[k2] - w[k] * w[k1] - w[k] * w[k2]
                };
                s += rate * bracket;
            }
        }
        out[k] = gamma * s / pts.len() as f64;
    }
    out
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispersions_at_symmetry_points() {
        assert_eq!(next_nearest(1.0, [0.0; 3]), 1.0);
        assert!((next_nearest(0.0, [0.5; 3]) - 12.0).abs() < 1e-12);
        assert!((nearest(2.0, [0.5, 0.0, 0.0]) - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_field_has_no_collisions() {
        let w = vec![0.0; 27];
        let c = direct_collision(|k| next_nearest(1.0, k), 3, 0.5, 5.0, 1.0, &w, false);
        assert!(c.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn slope_of_a_line() {
        assert!((slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-12);
    }
}
