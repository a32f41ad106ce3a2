//! Microscopic lattice dynamics on a periodic `L³` lattice.
//!
//! The harmonic couplings are the periodized `α(x)`, obtained by an inverse
//! DFT of `ω(k)² − ω₀²` on the `L³` mode grid, so the lattice dispersion is
//! exactly `ω` at every grid point. Mode amplitudes follow
//! `a(k) = (√ω q̂ + i p̂/√ω)/√2` with `q̂(k) = Σₓ e^{−2πik·x} qₓ`, and the
//! occupation estimate is `|a(k)|²/L³`.

use crate::collision::{build_triples_windowed, collide_classical, CollisionParams, PrefactorKind};
use crate::error::{invalid, Error, Result};
use crate::lattice::{BrillouinGrid, DispersionModel, DosTable};
use crate::modes::{ModeSet, Occupation, Statistics};
use crate::rng;
use crate::scalar::Real;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

/// Largest allowed `dt·ω_max`.
pub const MAX_DT_OMEGA: f64 = 0.1;

/// Harmonic lattice: couplings, mode frequencies and FFT plans.
#[derive(Clone)]
pub struct Lattice<T: Real> {
    model: DispersionModel<T>,
    grid: BrillouinGrid,
    omega: Vec<T>,
    /// Coupling offsets and values, `α(0)` first.
    stencil: Vec<([usize; 3], T)>,
    neighbors: Vec<Vec<u32>>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Lattice<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lattice")
            .field("model", &self.model)
            .field("side", &self.grid.n())
            .field("stencil", &self.stencil.len())
            .finish()
    }
}

impl<T: Real> Lattice<T> {
    pub fn new(model: DispersionModel<T>, side: usize) -> Result<Self> {
        if !model.is_lattice() {
            return invalid("microdynamics needs a lattice dispersion model");
        }
        model.validate()?;
        let grid = BrillouinGrid::new(side)?;
        let omega: Vec<T> = (0..grid.len()).map(|i| model.omega(&grid.k(i))).collect();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft(side, FftDirection::Forward);
        let inverse = planner.plan_fft(side, FftDirection::Inverse);
        let w0 = model.omega0();
        let mut buf: Vec<Complex<T>> = omega.iter().map(|&w| Complex::new(w * w - w0 * w0, T::zero())).collect();
        fft3(&mut buf, side, &inverse);
        let m = T::count(grid.len());
        let alpha: Vec<T> = buf.iter().map(|c| c.re / m).collect();
        let amax = alpha.iter().fold(T::zero(), |a, x| a.max(x.abs()));
        let mut stencil = vec![([0, 0, 0], alpha[0])];
        for (i, &a) in alpha.iter().enumerate().skip(1) {
            if a.abs() > T::lit(1e-12) * amax {
                stencil.push((grid.coords(i), a));
            }
        }
        let neighbors = stencil
            .iter()
            .map(|(o, _)| {
                (0..grid.len())
                    .map(|x| {
                        let c = grid.coords(x);
                        grid.index([(c[0] + o[0]) % side, (c[1] + o[1]) % side, (c[2] + o[2]) % side]) as u32
                    })
                    .collect()
            })
            .collect();
        Ok(Self { model, grid, omega, stencil, neighbors, forward, inverse })
    }

    pub fn model(&self) -> &DispersionModel<T> {
        &self.model
    }

    pub fn grid(&self) -> BrillouinGrid {
        self.grid
    }

    pub fn side(&self) -> usize {
        self.grid.n()
    }

    pub fn sites(&self) -> usize {
        self.grid.len()
    }

    /// `ω(k)` on the `L³` grid.
    pub fn omega(&self) -> &[T] {
        &self.omega
    }

    pub fn omega_max(&self) -> T {
        self.omega.iter().fold(T::zero(), |a, &x| a.max(x))
    }

    /// Number of nonzero couplings `α(x)`, including `x = 0`.
    pub fn stencil_len(&self) -> usize {
        self.stencil.len()
    }

    /// `(Σ_y α(y − x) q_y)ₓ`.
    fn couple(&self, q: &[T], out: &mut [T]) {
        out.par_iter_mut().enumerate().for_each(|(x, o)| {
            let mut s = T::zero();
            for ((_, a), nb) in self.stencil.iter().zip(&self.neighbors) {
                s = s + *a * q[nb[x] as usize];
            }
            *o = s;
        });
    }

    /// Frequencies used to define `a(k)`. With `dt` these are the
    /// velocity-Verlet shadow frequencies `ω(1 − ω²dt²/4)^½`, for which
    /// `|a(k)|²` is an exact invariant of the discrete harmonic map.
    pub fn mode_frequencies(&self, dt: Option<T>) -> Vec<T> {
        match dt {
            None => self.omega.clone(),
            Some(h) => self
                .omega
                .iter()
                .map(|&w| w * (T::one() - w * w * h * h / T::lit(4.0)).max(T::zero()).sqrt())
                .collect(),
        }
    }

    /// Phase advance per unit time of the discrete harmonic map,
    /// `(2/dt) asin(ω dt/2)`.
    pub fn rotation_frequencies(&self, dt: T) -> Vec<T> {
        let two = T::lit(2.0);
        self.omega.iter().map(|&w| two / dt * (w * dt / two).min(T::one()).asin()).collect()
    }

    fn check_state(&self, s: &LatticeState<T>) -> Result<()> {
        if s.side != self.side() || s.q.len() != self.sites() || s.p.len() != self.sites() {
            return Err(Error::Mismatch(format!("state of side {} on lattice of side {}", s.side, self.side())));
        }
        Ok(())
    }

    /// `a(k)` of a state, computed with `mode_frequencies(dt)`.
    pub fn a_field(&self, state: &LatticeState<T>, dt: Option<T>) -> Result<Vec<Complex<T>>> {
        self.check_state(state)?;
        let freq = self.mode_frequencies(dt);
        let mut qh: Vec<Complex<T>> = state.q.iter().map(|&x| Complex::new(x, T::zero())).collect();
        let mut ph: Vec<Complex<T>> = state.p.iter().map(|&x| Complex::new(x, T::zero())).collect();
        fft3(&mut qh, self.side(), &self.forward);
        fft3(&mut ph, self.side(), &self.forward);
        let r2 = T::lit(2.0).sqrt();
        Ok((0..self.sites())
            .map(|k| {
                let w = freq[k];
                if w > T::zero() {
                    let s = w.sqrt();
                    (qh[k] * s + Complex::new(T::zero(), T::one()) * ph[k] / s) / r2
                } else {
                    Complex::new(T::zero(), T::zero())
                }
            })
            .collect())
    }

    /// Real `q, p` from an `a`-field (modes with `ω = 0` are left at rest).
    pub fn state_from_a(&self, a: &[Complex<T>], epsilon: T) -> Result<LatticeState<T>> {
        if a.len() != self.sites() {
            return Err(Error::Mismatch("a-field length".into()));
        }
        let r2 = T::lit(2.0).sqrt();
        let i = Complex::new(T::zero(), T::one());
        let mut qh = vec![Complex::new(T::zero(), T::zero()); self.sites()];
        let mut ph = qh.clone();
        for k in 0..self.sites() {
            let w = self.omega[k];
            if w > T::zero() {
                let am = a[self.grid.neg(k)].conj();
                let s = w.sqrt();
                qh[k] = (a[k] + am) / (r2 * s);
                ph[k] = i * (am - a[k]) * s / r2;
            }
        }
        fft3(&mut qh, self.side(), &self.inverse);
        fft3(&mut ph, self.side(), &self.inverse);
        let m = T::count(self.sites());
        Ok(LatticeState {
            side: self.side(),
            q: qh.iter().map(|c| c.re / m).collect(),
            p: ph.iter().map(|c| c.re / m).collect(),
            xi: None,
            epsilon,
        })
    }

    /// `H₀ = ½Σ(p² + ω₀²q² + Σ α(x−y) qₓq_y)` in real space.
    pub fn harmonic_energy(&self, s: &LatticeState<T>) -> Result<T> {
        self.check_state(s)?;
        let mut aq = vec![T::zero(); self.sites()];
        self.couple(&s.q, &mut aq);
        let w0 = self.model.omega0();
        let e = (0..self.sites()).fold(T::zero(), |e, x| {
            e + s.p[x] * s.p[x] + w0 * w0 * s.q[x] * s.q[x] + s.q[x] * aq[x]
        });
        Ok(e / T::lit(2.0))
    }

    /// Full anharmonic energy `H₀ + Σ(√ε λ q³/3 + ε λ′ q⁴)`.
    pub fn anharmonic_energy(&self, s: &LatticeState<T>, lambda: T, epsilon: T) -> Result<T> {
        let h0 = self.harmonic_energy(s)?;
        let (c3, c4) = self.anharmonic_coefficients(lambda, epsilon);
        let v = s.q.iter().fold(T::zero(), |v, &q| v + c3 / T::lit(3.0) * q * q * q + c4 / T::lit(4.0) * q * q * q * q);
        Ok(h0 + v)
    }

    /// `√ε λ` and `4ελ′`, `λ′ = λ²/18ω₀²`.
    fn anharmonic_coefficients(&self, lambda: T, epsilon: T) -> (T, T) {
        let w0 = self.model.omega0();
        let l4 = if lambda == T::zero() { T::zero() } else { lambda * lambda / (T::lit(18.0) * w0 * w0) };
        (epsilon.sqrt() * lambda, T::lit(4.0) * epsilon * l4)
    }

    /// Disordered energy `½Σ((1 + √εξ)² p² + ω₀²q² + Σ α qₓq_y)`.
    pub fn disordered_energy(&self, s: &LatticeState<T>) -> Result<T> {
        self.check_state(s)?;
        let inv_m = self.inverse_masses(s)?;
        let mut aq = vec![T::zero(); self.sites()];
        self.couple(&s.q, &mut aq);
        let w0 = self.model.omega0();
        let e = (0..self.sites()).fold(T::zero(), |e, x| {
            e + inv_m[x] * s.p[x] * s.p[x] + w0 * w0 * s.q[x] * s.q[x] + s.q[x] * aq[x]
        });
        Ok(e / T::lit(2.0))
    }

    fn inverse_masses(&self, s: &LatticeState<T>) -> Result<Vec<T>> {
        let se = s.epsilon.sqrt();
        match &s.xi {
            None => Ok(vec![T::one(); self.sites()]),
            Some(xi) => {
                if xi.len() != self.sites() {
                    return Err(Error::Mismatch("disorder field length".into()));
                }
                if let Some(x) = xi.iter().find(|&&x| !(se * x.abs() < T::one())) {
                    return invalid(format!("sqrt(epsilon)*|xi| = {} violates mass positivity", se * x.abs()));
                }
                Ok(xi.iter().map(|&x| (T::one() + se * x) * (T::one() + se * x)).collect())
            }
        }
    }
}

/// 3D DFT in place, one axis at a time (unnormalized).
fn fft3<T: Real>(data: &mut [Complex<T>], n: usize, plan: &Arc<dyn Fft<T>>) {
    for row in data.chunks_mut(n) {
        plan.process(row);
    }
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    for stride in [n, n * n] {
        for base in 0..n * n * n {
            // Lines along the axis with this stride start where that coordinate is 0.
            if (base / stride) % n != 0 {
                continue;
            }
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * stride];
            }
            plan.process(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[base + j * stride] = *b;
            }
        }
    }
}

/// Positions, momenta and optional isotope disorder on a periodic `L³` lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeState<T> {
    pub side: usize,
    pub q: Vec<T>,
    pub p: Vec<T>,
    /// `ξₓ` with `1/mₓ = (1 + √ε ξₓ)²`.
    pub xi: Option<Vec<T>>,
    pub epsilon: T,
}

/// Draws `ensemble` states whose modes are independent complex Gaussians with
/// `E|a(k)|² = L³ W(k)` and `E a(k)² = 0`. Member `m` uses stream `(seed, m)`.
pub fn sample_gaussian_field<T: Real>(
    lattice: &Lattice<T>,
    w_target: &[T],
    ensemble: usize,
    epsilon: T,
    seed: u64,
) -> Result<Vec<LatticeState<T>>> {
    if w_target.len() != lattice.sites() {
        return Err(Error::Mismatch(format!("{} target values for {} modes", w_target.len(), lattice.sites())));
    }
    if w_target.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
        return invalid("target occupation must be finite and nonnegative");
    }
    let m = T::count(lattice.sites());
    (0..ensemble)
        .into_par_iter()
        .map(|e| {
            let mut r = rng::stream(seed, e as u64);
            let a: Vec<Complex<T>> = w_target
                .iter()
                .map(|&w| {
                    let s = (m * w / T::lit(2.0)).sqrt();
                    let g1: f64 = StandardNormal.sample(&mut r);
                    let g2: f64 = StandardNormal.sample(&mut r);
                    Complex::new(s * T::lit(g1), s * T::lit(g2))
                })
                .collect();
            lattice.state_from_a(&a, epsilon)
        })
        .collect()
}

/// Uniform disorder on `[−c₀, c₀]`.
pub fn sample_disorder<T: Real>(sites: usize, c0: T, seed: u64, index: u64) -> Vec<T> {
    let mut r = rng::stream(seed, index);
    (0..sites).map(|_| c0 * T::lit(2.0 * r.random::<f64>() - 1.0)).collect()
}

fn check_dt<T: Real>(dt: T, omega_max: T) -> Result<()> {
    if !(dt > T::zero()) {
        return invalid("dt must be positive");
    }
    if dt * omega_max > T::lit(MAX_DT_OMEGA) {
        return invalid(format!("dt*omega_max = {} exceeds {MAX_DT_OMEGA}", dt * omega_max));
    }
    Ok(())
}

/// Velocity Verlet for `q̈ = −Σα q − ω₀² q − √ελ q² − 4ελ′ q³`.
pub fn integrate_anharmonic<T: Real>(
    lattice: &Lattice<T>,
    state: &mut LatticeState<T>,
    lambda: T,
    epsilon: T,
    dt: T,
    steps: usize,
) -> Result<()> {
    lattice.check_state(state)?;
    if state.xi.is_some() {
        return invalid("anharmonic integration of a disordered state");
    }
    if lambda != T::zero() && !(lattice.model.omega0() > T::zero()) {
        return invalid("lambda != 0 needs omega0 > 0 for the quartic stabilizer");
    }
    if !(epsilon >= T::zero()) {
        return invalid("epsilon must be nonnegative");
    }
    check_dt(dt, lattice.omega_max())?;
    let (c3, c4) = lattice.anharmonic_coefficients(lambda, epsilon);
    let w2 = lattice.model.omega0() * lattice.model.omega0();
    let half = dt / T::lit(2.0);
    let n = lattice.sites();
    let mut f = vec![T::zero(); n];
    let force = |q: &[T], f: &mut [T]| {
        lattice.couple(q, f);
        for (fx, &qx) in f.iter_mut().zip(q) {
            *fx = -(*fx + w2 * qx + c3 * qx * qx + c4 * qx * qx * qx);
        }
    };
    force(&state.q, &mut f);
    for _ in 0..steps {
        for x in 0..n {
            state.p[x] = state.p[x] + half * f[x];
            state.q[x] = state.q[x] + dt * state.p[x];
        }
        force(&state.q, &mut f);
        for x in 0..n {
            state.p[x] = state.p[x] + half * f[x];
        }
    }
    if state.q.iter().chain(&state.p).any(|x| !x.is_finite()) {
        return Err(Error::BlowUp("lattice state became non-finite".into()));
    }
    Ok(())
}

/// Largest relative deviation of the anharmonic energy from its initial
/// value, sampled every `sample_every` steps over `steps` Verlet steps.
#[allow(clippy::too_many_arguments)]
pub fn energy_error<T: Real>(
    lattice: &Lattice<T>,
    state: &LatticeState<T>,
    lambda: T,
    epsilon: T,
    dt: T,
    steps: usize,
    sample_every: usize,
) -> Result<T> {
    if sample_every == 0 {
        return invalid("sample interval must be positive");
    }
    let mut s = state.clone();
    let e0 = lattice.anharmonic_energy(&s, lambda, epsilon)?;
    let mut worst = T::zero();
    let mut done = 0;
    while done < steps {
        let n = sample_every.min(steps - done);
        integrate_anharmonic(lattice, &mut s, lambda, epsilon, dt, n)?;
        done += n;
        worst = worst.max(((lattice.anharmonic_energy(&s, lambda, epsilon)? - e0) / e0).abs());
    }
    Ok(worst)
}

/// Observed order `log₂(err(dt)/err(dt/2))` of the energy error over a fixed
/// time span `steps·dt`, sampled at the same instants for both step sizes.
pub fn energy_order<T: Real>(
    lattice: &Lattice<T>,
    state: &LatticeState<T>,
    lambda: T,
    epsilon: T,
    dt: T,
    steps: usize,
    sample_every: usize,
) -> Result<(T, T, T)> {
    let coarse = energy_error(lattice, state, lambda, epsilon, dt, steps, sample_every)?;
    let fine = energy_error(lattice, state, lambda, epsilon, dt / T::lit(2.0), 2 * steps, 2 * sample_every)?;
    if !(fine > T::zero()) {
        return Err(Error::Domain("energy error vanished at the finer step".into()));
    }
    Ok(((coarse / fine).log2(), coarse, fine))
}

/// Velocity Verlet for the isotope-disordered harmonic lattice,
/// `q̇ = (1 + √εξ)² p`, `ṗ = −Σα q − ω₀² q`.
pub fn integrate_disordered<T: Real>(lattice: &Lattice<T>, state: &mut LatticeState<T>, dt: T, steps: usize) -> Result<()> {
    lattice.check_state(state)?;
    let inv_m = lattice.inverse_masses(state)?;
    let speed = inv_m.iter().fold(T::zero(), |a, &x| a.max(x)).sqrt();
    check_dt(dt, lattice.omega_max() * speed)?;
    let w2 = lattice.model.omega0() * lattice.model.omega0();
    let half = dt / T::lit(2.0);
    let n = lattice.sites();
    let mut f = vec![T::zero(); n];
    let force = |q: &[T], f: &mut [T]| {
        lattice.couple(q, f);
        for (fx, &qx) in f.iter_mut().zip(q) {
            *fx = -(*fx + w2 * qx);
        }
    };
    force(&state.q, &mut f);
    for _ in 0..steps {
        for x in 0..n {
            state.p[x] = state.p[x] + half * f[x];
            state.q[x] = state.q[x] + dt * inv_m[x] * state.p[x];
        }
        force(&state.q, &mut f);
        for x in 0..n {
            state.p[x] = state.p[x] + half * f[x];
        }
    }
    Ok(())
}

/// Per-mode ensemble average of `|a(k)|²/L³` with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeEstimate<T> {
    pub side: usize,
    pub ensemble_size: usize,
    pub w: Vec<T>,
    pub stderr: Vec<T>,
}

impl<T: Real> ModeEstimate<T> {
    /// CSV `k1,k2,k3,West,stderr`.
    pub fn to_csv(&self) -> String {
        let g = BrillouinGrid::new(self.side).expect("side validated on construction");
        let mut s = String::from("k1,k2,k3,West,stderr\n");
        for i in 0..self.w.len() {
            let k: [f64; 3] = g.k(i);
            s.push_str(&format!("{},{},{},{:e},{:e}\n", k[0], k[1], k[2], self.w[i].as_f64(), self.stderr[i].as_f64()));
        }
        s
    }
}

/// `|a(k)|²/L³` of one state.
pub fn mode_occupation<T: Real>(lattice: &Lattice<T>, state: &LatticeState<T>, dt: Option<T>) -> Result<Vec<T>> {
    let m = T::count(lattice.sites());
    Ok(lattice.a_field(state, dt)?.iter().map(|a| a.norm_sqr() / m).collect())
}

/// Ensemble estimate of the occupation. `dt` selects shadow frequencies.
pub fn estimate_occupation<T: Real>(
    lattice: &Lattice<T>,
    ensemble: &[LatticeState<T>],
    dt: Option<T>,
) -> Result<ModeEstimate<T>> {
    if ensemble.is_empty() {
        return invalid("empty ensemble");
    }
    if let Some(s) = ensemble.iter().find(|s| s.side != ensemble[0].side) {
        return Err(Error::Mismatch(format!("mixed lattice sizes {} and {}", ensemble[0].side, s.side)));
    }
    let per: Vec<Vec<T>> = ensemble.par_iter().map(|s| mode_occupation(lattice, s, dt)).collect::<Result<_>>()?;
    let (w, stderr) = mean_and_stderr(&per);
    Ok(ModeEstimate { side: lattice.side(), ensemble_size: ensemble.len(), w, stderr })
}

fn mean_and_stderr<T: Real>(rows: &[Vec<T>]) -> (Vec<T>, Vec<T>) {
    let n = rows.len();
    let nf = T::count(n);
    let len = rows[0].len();
    let mut mean = vec![T::zero(); len];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m = *m + *x / nf;
        }
    }
    let mut var = vec![T::zero(); len];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v = *v + (*x - *m) * (*x - *m);
        }
    }
    let den = T::count(n.max(2) - 1) * nf;
    (mean, var.into_iter().map(|v| (v / den).sqrt()).collect())
}

/// Disorder-averaged occupation of one initially excited mode.
#[derive(Clone, Debug)]
pub struct DecayRun<T> {
    pub k_index: usize,
    pub omega: T,
    pub times: Vec<T>,
    /// `E|a(k*, t)|² / |a(k*, 0)|²`.
    pub survival: Vec<T>,
    pub stderr: Vec<T>,
    /// Largest relative drift of the disordered energy over all realizations.
    pub energy_drift: T,
}

impl<T: Real> DecayRun<T> {
    /// Least-squares decay rate of `ln survival` over `t ∈ [t0, t1]`.
    pub fn fit_rate(&self, t0: T, t1: T) -> Result<T> {
        let pts: Vec<(T, T)> = self
            .times
            .iter()
            .zip(&self.survival)
            .filter(|(t, s)| **t >= t0 && **t <= t1 && **s > T::zero())
            .map(|(t, s)| (*t, s.ln()))
            .collect();
        if pts.len() < 3 {
            return invalid("fewer than three points in the fit window");
        }
        let n = T::count(pts.len());
        let mx = pts.iter().map(|p| p.0).sum::<T>() / n;
        let my = pts.iter().map(|p| p.1).sum::<T>() / n;
        let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<T>();
        let sxx = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<T>();
        Ok(-sxy / sxx)
    }

    /// CSV `t,survival,stderr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,survival,stderr\n");
        for i in 0..self.times.len() {
            s.push_str(&format!("{:e},{:e},{:e}\n", self.times[i].as_f64(), self.survival[i].as_f64(), self.stderr[i].as_f64()));
        }
        s
    }
}

/// Excites mode `k_index` alone and follows `|a(k*)|²` under the disordered
/// dynamics for `realizations` independent disorder draws.
#[allow(clippy::too_many_arguments)]
pub fn disorder_decay<T: Real>(
    lattice: &Lattice<T>,
    k_index: usize,
    c0: T,
    epsilon: T,
    realizations: usize,
    dt: T,
    record_every: usize,
    records: usize,
    seed: u64,
) -> Result<DecayRun<T>> {
    if k_index >= lattice.sites() || !(lattice.omega[k_index] > T::zero()) {
        return invalid("excited mode must be a grid point with omega > 0");
    }
    if !(epsilon.sqrt() * c0 < T::one()) {
        return invalid(format!("sqrt(epsilon)*c0 = {} violates mass positivity", epsilon.sqrt() * c0));
    }
    if realizations == 0 || record_every == 0 {
        return invalid("need at least one realization and a positive record interval");
    }
    let mut a0 = vec![Complex::new(T::zero(), T::zero()); lattice.sites()];
    a0[k_index] = Complex::new(T::count(lattice.sites()).sqrt(), T::zero());
    let base = lattice.state_from_a(&a0, epsilon)?;
    let runs: Vec<(Vec<T>, T)> = (0..realizations)
        .into_par_iter()
        .map(|r| -> Result<(Vec<T>, T)> {
            let mut s = base.clone();
            s.xi = Some(sample_disorder(lattice.sites(), c0, seed, r as u64));
            let e0 = lattice.disordered_energy(&s)?;
            let norm = mode_occupation(lattice, &s, None)?[k_index];
            let mut out = vec![T::one()];
            let mut drift = T::zero();
            for _ in 0..records {
                integrate_disordered(lattice, &mut s, dt, record_every)?;
                out.push(mode_occupation(lattice, &s, None)?[k_index] / norm);
                drift = drift.max(((lattice.disordered_energy(&s)? - e0) / e0).abs());
            }
            Ok((out, drift))
        })
        .collect::<Result<_>>()?;
    let drift = runs.iter().fold(T::zero(), |a, r| a.max(r.1));
    let rows: Vec<Vec<T>> = runs.into_iter().map(|r| r.0).collect();
    let (survival, stderr) = mean_and_stderr(&rows);
    let times = (0..=records).map(|i| dt * T::count(i * record_every)).collect();
    Ok(DecayRun { k_index, omega: lattice.omega[k_index], times, survival, stderr, energy_drift: drift })
}

/// Golden-rule decay rate `2π 𝔼ξ² ω² τ(ω) ε` of a single mode under uniform
/// disorder on `[−c₀, c₀]` (`𝔼ξ² = c₀²/3`), with `τ` from a density-of-states table.
pub fn predicted_decay_rate<T: Real>(dos: &DosTable<T>, omega: T, c0: T, epsilon: T) -> T {
    T::two_pi() * c0 * c0 / T::lit(3.0) * omega * omega * dos.eval(omega) * epsilon
}

/// Ensemble-mean change of `|a(k)|²/L³` over `steps` anharmonic steps, per unit time.
#[derive(Clone, Debug)]
pub struct DriftEstimate<T> {
    pub window: T,
    pub rate: Vec<T>,
    pub stderr: Vec<T>,
}

/// Measures the initial occupation drift of a Gaussian ensemble with target
/// `w_target` (shadow-frequency `a`-field, per-member differences).
///
/// Every draw is paired with its negative `(−q, −p)`. The first-order
/// response to the cubic term is odd in the field and cancels within a
/// pair; the second-order (kinetic) response is even and adds. `ensemble`
/// counts pairs.
#[allow(clippy::too_many_arguments)]
pub fn anharmonic_drift<T: Real>(
    lattice: &Lattice<T>,
    w_target: &[T],
    lambda: T,
    epsilon: T,
    ensemble: usize,
    dt: T,
    steps: usize,
    seed: u64,
) -> Result<DriftEstimate<T>> {
    if ensemble < 2 {
        return invalid("drift estimate needs at least two pairs");
    }
    let members = sample_gaussian_field(lattice, w_target, ensemble, epsilon, seed)?;
    check_dt(dt, lattice.omega_max())?;
    let window = dt * T::count(steps);
    let change = |mut s: LatticeState<T>| -> Result<Vec<T>> {
        let w0 = mode_occupation(lattice, &s, Some(dt))?;
        integrate_anharmonic(lattice, &mut s, lambda, epsilon, dt, steps)?;
        let w1 = mode_occupation(lattice, &s, Some(dt))?;
        Ok(w1.iter().zip(&w0).map(|(a, b)| (*a - *b) / window).collect())
    };
    let rows: Vec<Vec<T>> = members
        .into_par_iter()
        .map(|s| -> Result<Vec<T>> {
            let mut neg = s.clone();
            neg.q.iter_mut().chain(neg.p.iter_mut()).for_each(|x| *x = -*x);
            let a = change(s)?;
            let b = change(neg)?;
            Ok(a.iter().zip(&b).map(|(x, y)| (*x + *y) / T::lit(2.0)).collect())
        })
        .collect::<Result<_>>()?;
    let (rate, stderr) = mean_and_stderr(&rows);
    Ok(DriftEstimate { window, rate, stderr })
}

/// Second-order prediction of [`anharmonic_drift`]: `ε C(W)` with the
/// classical three-phonon operator whose resonance function is the Fejér
/// kernel of the window `steps·dt`, detuned at the integrator's rotation
/// frequencies. Every triple is kept. As the window grows this tends to
/// `ε C(W)` with a sharp delta.
pub fn drift_prediction<T: Real>(
    lattice: &Lattice<T>,
    w_target: &[T],
    lambda: T,
    epsilon: T,
    dt: T,
    steps: usize,
) -> Result<Vec<T>> {
    check_dt(dt, lattice.omega_max())?;
    if steps == 0 {
        return invalid("window needs at least one step");
    }
    let window = dt * T::count(steps);
    let modes = ModeSet::new(lattice.model.clone(), lattice.grid)?;
    let rot = lattice.rotation_frequencies(dt);
    let span = T::lit(3.0) * rot.iter().fold(T::zero(), |m, &w| m.max(w));
    let cutoff = (span * window).max(T::lit(3.0));
    let triples = build_triples_windowed(&modes, window, cutoff, PrefactorKind::OnSite, Some(&rot))?;
    let occ = Occupation::new(lattice.grid, w_target.to_vec(), Statistics::Classical)?;
    let c = collide_classical(&occ, &triples, &CollisionParams::from_lambda(lambda, lattice.model.omega0()))?;
    Ok(c.into_iter().map(|x| epsilon * x).collect())
}

/// Pearson correlation of two samples.
pub fn pearson<T: Real>(x: &[T], y: &[T]) -> T {
    let n = T::count(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (a, b) in x.iter().zip(y) {
        sxy = sxy + (*a - mx) * (*b - my);
        sxx = sxx + (*a - mx) * (*a - mx);
        syy = syy + (*b - my) * (*b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nn(side: usize) -> Lattice<f64> {
        Lattice::new(DispersionModel::NearestNeighbor { omega0: 1.0 }, side).unwrap()
    }

    #[test]
    fn stencil_recovers_nearest_neighbor_couplings() {
        let l = nn(6);
        assert_eq!(l.stencil_len(), 7);
        assert!((l.stencil[0].1 - 6.0).abs() < 1e-12);
        assert!(l.stencil[1..].iter().all(|(_, a)| (a + 1.0).abs() < 1e-12));
    }

    #[test]
    fn a_field_round_trip_and_parseval() {
        let l = Lattice::new(DispersionModel::NextNearestPaper { omega0: 1.0 }, 6).unwrap();
        let w = vec![0.7; l.sites()];
        let s = &sample_gaussian_field(&l, &w, 1, 0.0, 3).unwrap()[0];
        let a = l.a_field(s, None).unwrap();
        let back = l.state_from_a(&a, 0.0).unwrap();
        for (x, y) in s.q.iter().chain(&s.p).zip(back.q.iter().chain(&back.p)) {
            let d: f64 = x - y;
            assert!(d.abs() < 1e-12);
        }
        let m = l.sites() as f64;
        let h: f64 = a.iter().zip(l.omega()).map(|(a, w)| w * a.norm_sqr() / m).sum();
        let e = l.harmonic_energy(s).unwrap();
        assert!((h - e).abs() < 1e-10 * e);
    }

    #[test]
    fn sampler_has_target_variance() {
        let l = nn(4);
        let w = vec![1.0; l.sites()];
        let ens = sample_gaussian_field(&l, &w, 400, 0.0, 1).unwrap();
        let est = estimate_occupation(&l, &ens, None).unwrap();
        let mean = est.w.iter().sum::<f64>() / est.w.len() as f64;
        assert!((mean - 1.0).abs() < 4.0 / (400.0f64 * 64.0).sqrt(), "{mean}");
    }

    #[test]
    fn harmonic_modes_are_invariant_with_shadow_frequencies() {
        let l = nn(6);
        let dt = 0.1 / l.omega_max();
        let w = vec![1.0; l.sites()];
        let mut s = sample_gaussian_field(&l, &w, 1, 0.0, 2).unwrap().remove(0);
        let before = mode_occupation(&l, &s, Some(dt)).unwrap();
        integrate_anharmonic(&l, &mut s, 0.0, 0.0, dt, 2000).unwrap();
        let after = mode_occupation(&l, &s, Some(dt)).unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - b).abs() <= 1e-8 * b.max(1e-3), "{a} {b}");
        }
    }

    #[test]
    fn refuses_large_steps_and_negative_masses() {
        let l = nn(4);
        let w = vec![1.0; l.sites()];
        let mut s = sample_gaussian_field(&l, &w, 1, 0.0, 2).unwrap().remove(0);
        assert!(integrate_anharmonic(&l, &mut s, 0.0, 0.0, 1.0, 1).is_err());
        s.epsilon = 0.25;
        s.xi = Some(vec![2.5; l.sites()]);
        assert!(integrate_disordered(&l, &mut s, 0.01, 1).is_err());
    }

    #[test]
    fn zero_disorder_matches_harmonic_evolution() {
        let l = nn(4);
        let w = vec![1.0; l.sites()];
        let s0 = sample_gaussian_field(&l, &w, 1, 0.01, 4).unwrap().remove(0);
        let mut a = s0.clone();
        let mut b = s0.clone();
        b.xi = Some(vec![0.0; l.sites()]);
        integrate_anharmonic(&l, &mut a, 0.0, 0.01, 0.02, 100).unwrap();
        integrate_disordered(&l, &mut b, 0.02, 100).unwrap();
        assert_eq!(a.q, b.q);
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let l = nn(4);
        let w = vec![1.0; l.sites()];
        let mut ens = sample_gaussian_field(&l, &w, 2, 0.0, 1).unwrap();
        ens[1].side = 5;
        assert!(matches!(estimate_occupation(&l, &ens, None), Err(Error::Mismatch(_))));
    }

    #[test]
    fn verlet_energy_error_is_second_order() {
        let l = Lattice::new(DispersionModel::NextNearestPaper { omega0: 1.0 }, 4).unwrap();
        let w: Vec<f64> = l.omega().iter().map(|w| 1.0 / w).collect();
        let s = &sample_gaussian_field(&l, &w, 1, 0.1, 5).unwrap()[0];
        let dt = 0.08 / l.omega_max();
        let (order, coarse, fine) = energy_order(&l, s, 1.0, 0.1, dt, 2000, 10).unwrap();
        assert!(coarse > fine);
        assert!((order - 2.0).abs() < 0.2, "{order}");
    }
}
