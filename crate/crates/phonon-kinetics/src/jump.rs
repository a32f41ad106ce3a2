//! Particle Monte Carlo for the isotope jump process.
//!
//! A particle at `(r, k)` streams with the group velocity and jumps
//! `k → k′` at rate `K(k, k′)`; the grid histogram of `k` then solves the
//! linear isotope Boltzmann equation.

use crate::collision::IsotopeKernel;
use crate::error::{invalid, Error, Result};
use crate::modes::ModeSet;
use crate::rng;
use crate::scalar::{Real, Vec3};
use rand::Rng;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle<T> {
    pub r: Vec3<T>,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub struct JumpEnsemble<T> {
    pub particles: Vec<Particle<T>>,
}

impl<T: Real> JumpEnsemble<T> {
    /// `count` particles at the origin, all at mode `k`.
    pub fn concentrated(count: usize, k: usize) -> Self {
        Self { particles: vec![Particle { r: [T::zero(); 3], k }; count] }
    }

    /// Particle counts per grid point.
    pub fn histogram(&self, grid_len: usize) -> Vec<u64> {
        let mut h = vec![0u64; grid_len];
        for p in &self.particles {
            h[p.k] += 1;
        }
        h
    }
}

fn draw_target<T: Real, R: Rng>(kernel: &IsotopeKernel<T>, k: usize, total: T, r: &mut R) -> usize {
    let (cols, vals) = kernel.row(k);
    let u = T::lit(r.random::<f64>()) * total;
    let mut acc = T::zero();
    for (&c, &v) in cols.iter().zip(vals) {
        acc = acc + v;
        if u < acc {
            return c as usize;
        }
    }
    *cols.last().expect("nonempty row") as usize
}

fn check<T: Real>(modes: &ModeSet<T>, kernel: &IsotopeKernel<T>, ens: &JumpEnsemble<T>) -> Result<()> {
    if kernel.row_start.len() != modes.len() + 1 {
        return Err(Error::Mismatch("isotope kernel built on a different grid".into()));
    }
    if let Some(p) = ens.particles.iter().find(|p| p.k >= modes.len() || !modes.is_active(p.k)) {
        return invalid(format!("particle at inactive or out-of-range mode {}", p.k));
    }
    Ok(())
}

/// Runs one particle to each time in `checkpoints` (ascending), recording its mode.
fn run_particle<T: Real>(
    p: Particle<T>,
    modes: &ModeSet<T>,
    kernel: &IsotopeKernel<T>,
    checkpoints: &[T],
    seed: u64,
    index: u64,
) -> (Particle<T>, Vec<usize>, Option<T>) {
    let mut r = rng::stream(seed, index);
    let mut state = p;
    let mut t = T::zero();
    let mut first_jump = None;
    let mut seen = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    let stream = |s: &mut Particle<T>, dt: T| {
        let v = modes.group_velocity(s.k);
        for d in 0..3 {
            s.r[d] = s.r[d] + v[d] * dt;
        }
    };
    while next < checkpoints.len() {
        let rate = kernel.total_rate(state.k);
        let wait = if rate > T::zero() {
            let u: f64 = r.random::<f64>();
            -T::lit((1.0 - u).ln()) / rate
        } else {
            T::infinity()
        };
        let at = t + wait;
        while next < checkpoints.len() && at > checkpoints[next] {
            stream(&mut state, checkpoints[next] - t);
            t = checkpoints[next];
            seen.push(state.k);
            next += 1;
        }
        if next == checkpoints.len() {
            break;
        }
        stream(&mut state, at - t);
        t = at;
        if first_jump.is_none() {
            first_jump = Some(t);
        }
        state.k = draw_target(kernel, state.k, rate, &mut r);
    }
    (state, seen, first_jump)
}

/// Evolves every particle to `t_end`. Each particle uses its own random stream.
pub fn evolve_jump_mc<T: Real>(
    ensemble: &JumpEnsemble<T>,
    modes: &ModeSet<T>,
    kernel: &IsotopeKernel<T>,
    t_end: T,
    seed: u64,
) -> Result<JumpEnsemble<T>> {
    Ok(jump_checkpoints(ensemble, modes, kernel, &[t_end], seed)?.0)
}

/// Histograms of the particle modes at each checkpoint time, the final
/// ensemble, and each particle's first jump time (infinite if none).
pub fn jump_checkpoints<T: Real>(
    ensemble: &JumpEnsemble<T>,
    modes: &ModeSet<T>,
    kernel: &IsotopeKernel<T>,
    checkpoints: &[T],
    seed: u64,
) -> Result<(JumpEnsemble<T>, Vec<Vec<u64>>, Vec<T>)> {
    check(modes, kernel, ensemble)?;
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| !(w[1] > w[0])) || !(checkpoints[0] >= T::zero()) {
        return invalid("checkpoint times must be nonnegative and strictly increasing");
    }
    let runs: Vec<(Particle<T>, Vec<usize>, Option<T>)> = ensemble
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, &p)| run_particle(p, modes, kernel, checkpoints, seed, i as u64))
        .collect();
    let mut hist = vec![vec![0u64; modes.len()]; checkpoints.len()];
    let mut particles = Vec::with_capacity(runs.len());
    let mut first = Vec::with_capacity(runs.len());
    for (p, seen, fj) in runs {
        for (c, k) in seen.into_iter().enumerate() {
            hist[c][k] += 1;
        }
        particles.push(p);
        first.push(fj.unwrap_or(T::infinity()));
    }
    Ok((JumpEnsemble { particles }, hist, first))
}

/// Grid solution of `∂p/∂t = Σ K(k, k₁)(p(k₁) − p(k))` by RK4 at the checkpoints.
pub fn isotope_grid_solution<T: Real>(
    p0: &[T],
    kernel: &IsotopeKernel<T>,
    checkpoints: &[T],
    dt: T,
) -> Result<Vec<Vec<T>>> {
    if !(dt > T::zero()) {
        return invalid("dt must be positive");
    }
    let mut p = p0.to_vec();
    let mut t = T::zero();
    let mut out = Vec::with_capacity(checkpoints.len());
    let axpy = |a: &[T], s: T, d: &[T]| -> Vec<T> { a.iter().zip(d).map(|(x, y)| *x + s * *y).collect() };
    for &tc in checkpoints {
        let steps = ((tc - t) / dt).ceil().to_usize().unwrap_or(0);
        if steps > 0 {
            let h = (tc - t) / T::count(steps);
            for _ in 0..steps {
                let k1 = kernel.apply(&p);
                let k2 = kernel.apply(&axpy(&p, h / T::lit(2.0), &k1));
                let k3 = kernel.apply(&axpy(&p, h / T::lit(2.0), &k2));
                let k4 = kernel.apply(&axpy(&p, h, &k3));
                for i in 0..p.len() {
                    p[i] = p[i] + h / T::lit(6.0) * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]);
                }
            }
        }
        t = tc;
        out.push(p.clone());
    }
    Ok(out)
}

/// Total variation distance `½ Σ |count/n − p|`.
pub fn total_variation<T: Real>(hist: &[u64], p: &[T]) -> T {
    let n: u64 = hist.iter().sum();
    let nf = T::lit(n as f64);
    hist.iter().zip(p).fold(T::zero(), |s, (&h, &q)| s + (T::lit(h as f64) / nf - q).abs()) / T::lit(2.0)
}

/// Expected total variation of an `n`-sample multinomial draw from `p`
/// (normal approximation, `E|X| = σ√(2/π)` per cell).
pub fn expected_sampling_tv<T: Real>(p: &[T], n: usize) -> T {
    let nf = T::count(n);
    let c = (T::lit(2.0) / T::PI()).sqrt();
    p.iter().fold(T::zero(), |s, &q| s + c * (q * (T::one() - q) / nf).max(T::zero()).sqrt()) / T::lit(2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{BrillouinGrid, DispersionModel};

    fn setup(variance: f64) -> (ModeSet<f64>, IsotopeKernel<f64>) {
        let m = ModeSet::new(DispersionModel::NearestNeighbor { omega0: 1.0 }, BrillouinGrid::new(6).unwrap()).unwrap();
        let eta = m.model().default_delta_width(&m.grid());
        let k = IsotopeKernel::build(&m, variance, eta, 5.0).unwrap();
        (m, k)
    }

    #[test]
    fn zero_variance_is_ballistic() {
        let (m, k) = setup(0.0);
        let start = m.grid().index([1, 2, 0]);
        let e = JumpEnsemble::<f64>::concentrated(10, start);
        let out = evolve_jump_mc(&e, &m, &k, 3.0, 1).unwrap();
        let v = m.group_velocity(start);
        for p in &out.particles {
            assert_eq!(p.k, start);
            for d in 0..3 {
                assert!((p.r[d] - 3.0 * v[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_number_conserving() {
        let (m, k) = setup(0.5);
        let start = m.grid().index([1, 1, 0]);
        let e = JumpEnsemble::<f64>::concentrated(500, start);
        let (a, ha, _) = jump_checkpoints(&e, &m, &k, &[0.5, 1.0], 7).unwrap();
        let (b, hb, _) = jump_checkpoints(&e, &m, &k, &[0.5, 1.0], 7).unwrap();
        assert_eq!(a.particles, b.particles);
        assert_eq!(ha, hb);
        assert!(ha.iter().all(|h| h.iter().sum::<u64>() == 500));
    }

    #[test]
    fn grid_solution_keeps_mass() {
        let (m, k) = setup(0.5);
        let mut p0 = vec![0.0; m.len()];
        p0[m.grid().index([2, 1, 0])] = 1.0;
        let sol = isotope_grid_solution(&p0, &k, &[1.0, 5.0], 0.01).unwrap();
        for s in &sol {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.iter().all(|&x| x > -1e-12));
        }
    }

    #[test]
    fn first_jumps_are_exponential_across_checkpoints() {
        let (m, k) = setup(0.5);
        let start = m.grid().index([1, 2, 0]);
        let e = JumpEnsemble::<f64>::concentrated(20_000, start);
        let nu = k.total_rate(start);
        let cps: Vec<f64> = (1..=20).map(|i| i as f64 * 0.1 / nu).collect();
        let (_, _, first) = jump_checkpoints(&e, &m, &k, &cps, 3).unwrap();
        let horizon = *cps.last().unwrap();
        let jumps = first.iter().filter(|t| **t <= horizon).count() as f64;
        let exposure: f64 = first.iter().map(|t| t.min(horizon)).sum();
        let rate = jumps / exposure;
        assert!((rate / nu - 1.0).abs() < 4.0 / jumps.sqrt(), "{rate} vs {nu}");
    }
}
