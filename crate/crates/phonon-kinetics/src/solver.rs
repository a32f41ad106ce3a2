//! Time integration of the kinetic equation: spatially homogeneous
//! relaxation and a one-dimensional slab between thermal walls.

use crate::collision::{collide_values, energy, entropy, entropy_production, CollisionParams, Kernel, TripleList};
use crate::error::{invalid, Error, Result};
use crate::modes::{equilibrium_value, ModeSet, Occupation, Statistics};
use crate::scalar::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How the homogeneous solver evaluates the collision term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Energy-projected stoichiometry per reaction.
    #[default]
    Conservative,
    /// The raw operator, no projection.
    Raw,
    /// The raw operator, with each step's increment projected onto `Σ ω dW = 0`.
    RawGlobalProjection,
}

impl Scheme {
    pub fn kernel(self) -> Kernel {
        match self {
            Scheme::Conservative => Kernel::Conservative,
            Scheme::Raw | Scheme::RawGlobalProjection => Kernel::Raw,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvolveOptions {
    pub scheme: Scheme,
    /// Step halvings allowed within one nominal step before aborting.
    pub max_halvings: usize,
    /// Log every this many nominal steps (the final state is always logged).
    pub log_every: usize,
    /// Abort when `max W` exceeds this multiple of its initial value.
    pub blowup_factor: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { scheme: Scheme::Conservative, max_halvings: 20, log_every: 1, blowup_factor: 1e6 }
    }
}

/// Sampled observables along a homogeneous run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TrajectoryLog<T> {
    pub t: Vec<T>,
    pub energy: Vec<T>,
    pub entropy: Vec<T>,
    pub sigma: Vec<T>,
    /// `‖W − W_β*‖∞` with `β*` matched to the initial energy.
    pub dist_to_eq: Vec<T>,
    pub beta_star: T,
    pub halvings: usize,
}

impl<T: Real> TrajectoryLog<T> {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,energy,entropy,sigma,dist_to_eq\n");
        for i in 0..self.t.len() {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e}\n",
                self.t[i], self.energy[i], self.entropy[i], self.sigma[i], self.dist_to_eq[i]
            ));
        }
        s
    }
}

/// Inverse temperature whose equilibrium has energy `e` per unit volume.
///
/// Classical: `β* = n_active/(N³ e)` in closed form. Quantum: bisection in
/// `ln β`, since the energy is strictly decreasing in `β`.
pub fn beta_star<T: Real>(modes: &ModeSet<T>, e: T, statistics: Statistics) -> Result<T> {
    if !(e > T::zero()) || !e.is_finite() {
        return invalid(format!("energy must be positive, got {e}"));
    }
    let active = modes.active_indices();
    let m = T::count(modes.len());
    match statistics {
        Statistics::Classical => Ok(T::count(active.len()) / (m * e)),
        Statistics::Quantum => {
            let energy_at = |b: T| {
                active.iter().fold(T::zero(), |s, &i| {
                    let w = modes.omega()[i];
                    s + w * equilibrium_value(b, w, statistics)
                }) / m
            };
            let (mut lo, mut hi) = (T::lit(1e-12).ln(), T::lit(1e6).ln());
            if energy_at(lo.exp()) < e || energy_at(hi.exp()) > e {
                return Err(Error::NotConverged(format!("energy {e} outside the bracketed range")));
            }
            for _ in 0..200 {
                let mid = (lo + hi) / T::lit(2.0);
                if energy_at(mid.exp()) > e {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < T::epsilon() * T::lit(4.0) {
                    break;
                }
            }
            Ok(((lo + hi) / T::lit(2.0)).exp())
        }
    }
}

/// Least-squares `β` from `y = βω` through the origin, with
/// `y = ln(1 + 1/W)` (quantum) or `y = 1/W` (classical), over active modes.
pub fn fit_beta<T: Real>(w: &Occupation<T>, modes: &ModeSet<T>) -> Result<T> {
    let (mut sxy, mut sxx) = (T::zero(), T::zero());
    for i in modes.active_indices() {
        let x = modes.omega()[i];
        let v = w.values()[i];
        if v <= T::zero() {
            return Err(Error::Domain(format!("beta fit needs W > 0, W[{i}] = {v}")));
        }
        let y = match w.statistics() {
            Statistics::Classical => T::one() / v,
            Statistics::Quantum => (T::one() / v).ln_1p(),
        };
        sxy = sxy + x * y;
        sxx = sxx + x * x;
    }
    Ok(sxy / sxx)
}

fn max_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |m, (x, y)| m.max((*x - *y).abs()))
}

/// One RK4 step; `None` when a stage or the result leaves the admissible set.
fn rk4_step<T: Real, F>(v: &[T], h: T, active: &[bool], rhs: &F) -> Option<Vec<T>>
where
    F: Fn(&[T]) -> Vec<T>,
{
    let axpy = |a: &[T], s: T, d: &[T]| -> Vec<T> { a.iter().zip(d).map(|(x, y)| *x + s * *y).collect() };
    let half = h / T::lit(2.0);
    let k1 = rhs(v);
    let k2 = rhs(&axpy(v, half, &k1));
    let k3 = rhs(&axpy(v, half, &k2));
    let k4 = rhs(&axpy(v, h, &k3));
    let six = T::lit(6.0);
    let out: Vec<T> = (0..v.len())
        .map(|i| v[i] + h / six * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]))
        .collect();
    let ok = out.iter().zip(active).all(|(x, &a)| x.is_finite() && (!a || *x >= T::zero()));
    ok.then_some(out)
}

/// Advances `v` from 0 to `h` with RK4, halving on a positivity failure.
/// Returns the number of halvings used.
fn advance<T: Real, F>(
    v: &mut Vec<T>,
    h: T,
    active: &[bool],
    max_halvings: usize,
    rhs: &F,
    post: &dyn Fn(&[T], &mut Vec<T>),
) -> Result<usize>
where
    F: Fn(&[T]) -> Vec<T>,
{
    let mut t = T::zero();
    let mut step = h;
    let mut halvings = 0;
    while t < h {
        let s = step.min(h - t);
        match rk4_step(v, s, active, rhs) {
            Some(mut next) => {
                post(v, &mut next);
                *v = next;
                t = if h - t <= s { h } else { t + s };
            }
            None => {
                halvings += 1;
                if halvings > max_halvings {
                    let neg = v.iter().fold(T::infinity(), |m, &x| m.min(x));
                    return Err(Error::Positivity(format!(
                        "step rejected after {max_halvings} halvings (dt = {s:e}, min W = {neg:e})"
                    )));
                }
                step = s / T::lit(2.0);
            }
        }
    }
    Ok(halvings)
}

/// Integrates `∂W/∂t = C(W)` from `w0` to `t_end` with nominal step `dt`.
pub fn evolve_homogeneous<T: Real>(
    w0: &Occupation<T>,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
    t_end: T,
    dt: T,
    options: &EvolveOptions,
) -> Result<(TrajectoryLog<T>, Occupation<T>)> {
    if !(dt > T::zero()) || !(t_end >= T::zero()) {
        return invalid(format!("need dt > 0 and t_end >= 0, got dt = {dt}, t_end = {t_end}"));
    }
    let modes = triples.modes();
    if w0.grid() != modes.grid() {
        return Err(Error::Mismatch("initial occupation and triples use different grids".into()));
    }
    let stats = w0.statistics();
    let kernel = options.scheme.kernel();
    let active: Vec<bool> = (0..modes.len()).map(|i| modes.is_active(i)).collect();
    let omega = modes.omega().to_vec();
    let ww: T = omega.iter().zip(&active).filter(|p| *p.1).fold(T::zero(), |s, p| s + *p.0 * *p.0);
    let rhs = |v: &[T]| collide_values(v, stats, triples, params, kernel);
    let project = |old: &[T], new: &mut Vec<T>| {
        if options.scheme != Scheme::RawGlobalProjection {
            return;
        }
        let mut de = T::zero();
        for i in 0..new.len() {
            if active[i] {
                de = de + omega[i] * (new[i] - old[i]);
            }
        }
        let c = de / ww;
        for i in 0..new.len() {
            if active[i] {
                new[i] = new[i] - c * omega[i];
            }
        }
    };

    let e0 = energy(w0, modes)?;
    let beta = if e0 > T::zero() { beta_star(modes, e0, stats).ok() } else { None };
    let reference: Option<Vec<T>> =
        beta.map(|b| modes.equilibrium(b, stats).map(|o| o.into_values())).transpose()?;
    let w_max0 = w0.values().iter().fold(T::zero(), |m, &x| m.max(x));
    let limit = T::lit(options.blowup_factor) * w_max0.max(T::min_positive_value());

    let mut log = TrajectoryLog { beta_star: beta.unwrap_or(T::nan()), ..Default::default() };
    let record = |log: &mut TrajectoryLog<T>, t: T, v: &[T]| -> Result<()> {
        let occ = Occupation::new(modes.grid(), v.to_vec(), stats)?;
        log.t.push(t);
        log.energy.push(energy(&occ, modes)?);
        log.entropy.push(entropy(&occ, modes).unwrap_or(T::neg_infinity()));
        log.sigma.push(entropy_production(&occ, triples, params, kernel).unwrap_or(T::nan()));
        log.dist_to_eq.push(reference.as_ref().map_or(T::nan(), |r| max_dist(v, r)));
        Ok(())
    };

    let mut v = w0.values().to_vec();
    record(&mut log, T::zero(), &v)?;
    if triples.is_empty() || t_end == T::zero() {
        if t_end > T::zero() {
            record(&mut log, t_end, &v)?;
        }
        return Ok((log, w0.clone()));
    }
    let steps = (t_end / dt).ceil().to_usize().unwrap_or(1).max(1);
    let h = t_end / T::count(steps);
    for n in 1..=steps {
        log.halvings += advance(&mut v, h, &active, options.max_halvings, &rhs, &project)?;
        let w_max = v.iter().fold(T::zero(), |m, &x| m.max(x));
        if !(w_max <= limit) {
            return Err(Error::BlowUp(format!("max W = {w_max:e} at t = {}", T::count(n) * h)));
        }
        if n % options.log_every.max(1) == 0 || n == steps {
            record(&mut log, T::count(n) * h, &v)?;
        }
    }
    Ok((log, Occupation::new(modes.grid(), v, stats)?))
}

/// Power-iteration estimate of the spectral radius of the Jacobian of `C` at `w`
/// (finite differences); RK4 is stable for `dt · ρ ≲ 2.7`.
pub fn jacobian_radius<T: Real>(
    w: &Occupation<T>,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
    kernel: Kernel,
    iterations: usize,
) -> T {
    let modes = triples.modes();
    let v0 = w.values();
    let stats = w.statistics();
    let base = collide_values(v0, stats, triples, params, kernel);
    let scale = v0.iter().fold(T::zero(), |m, &x| m.max(x));
    let mut x: Vec<T> = (0..v0.len())
        .map(|i| if modes.is_active(i) { v0[i] * T::lit(1.0 + 0.37 * ((i * 7919 % 101) as f64 / 101.0)) } else { T::zero() })
        .collect();
    let mut rho = T::zero();
    for _ in 0..iterations {
        let nx = x.iter().fold(T::zero(), |s, &y| s + y * y).sqrt();
        if nx == T::zero() {
            return T::zero();
        }
        let eps = T::lit(1e-6) * scale / nx;
        let probe: Vec<T> = v0.iter().zip(&x).map(|(a, b)| *a + eps * *b).collect();
        let c = collide_values(&probe, stats, triples, params, kernel);
        let jx: Vec<T> = c.iter().zip(&base).map(|(a, b)| (*a - *b) / eps).collect();
        let nj = jx.iter().fold(T::zero(), |s, &y| s + y * y).sqrt();
        rho = nj / nx;
        x = jx;
    }
    rho
}

/// Per-cell occupations of a slab along axis 1, between thermal walls.
#[derive(Clone, Debug)]
pub struct SlabField<T> {
    pub cells: Vec<Occupation<T>>,
    pub dx: T,
    /// Wall temperatures `(T_L, T_R)`.
    pub temps: (T, T),
}

impl<T: Real> SlabField<T> {
    /// Local equilibria with temperatures interpolated linearly between the walls.
    pub fn linear_profile(modes: &ModeSet<T>, cells: usize, dx: T, temps: (T, T), statistics: Statistics) -> Result<Self> {
        if cells < 2 || !(dx > T::zero()) {
            return invalid("slab needs at least two cells and dx > 0");
        }
        if !(temps.0 > T::zero() && temps.1 > T::zero()) {
            return invalid("wall temperatures must be positive");
        }
        let n = T::count(cells);
        let cells = (0..cells)
            .map(|c| {
                let x = (T::count(c) + T::lit(0.5)) / n;
                let temp = temps.0 + (temps.1 - temps.0) * x;
                modes.equilibrium(T::one() / temp, statistics)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cells, dx, temps })
    }

    pub fn statistics(&self) -> Statistics {
        self.cells[0].statistics()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SlabOptions {
    pub kernel: Kernel,
    /// Record the flux profile every this many steps.
    pub log_every: usize,
    pub max_halvings: usize,
}

impl Default for SlabOptions {
    fn default() -> Self {
        Self { kernel: Kernel::Conservative, log_every: 100, max_halvings: 20 }
    }
}

/// Energy flux profiles recorded during a slab run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct FluxLog<T> {
    pub t: Vec<T>,
    pub flux: Vec<Vec<T>>,
}

/// Local temperature and energy flux of one cell.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CellProfile<T> {
    pub cell: usize,
    pub x: T,
    pub temperature: T,
    pub flux: T,
}

/// Energy flux `j_e = ∫dk ω v₁ W` of every cell.
pub fn slab_flux<T: Real>(field: &SlabField<T>, modes: &ModeSet<T>) -> Vec<T> {
    let v1: Vec<T> = (0..modes.len()).map(|i| modes.group_velocity(i)[0]).collect();
    let m = T::count(modes.len());
    field
        .cells
        .iter()
        .map(|c| {
            modes
                .active_indices()
                .iter()
                .fold(T::zero(), |s, &i| s + modes.omega()[i] * v1[i] * c.values()[i])
                / m
        })
        .collect()
}

/// Cell centres, energy-matched temperatures and fluxes.
pub fn slab_profile<T: Real>(field: &SlabField<T>, modes: &ModeSet<T>) -> Result<Vec<CellProfile<T>>> {
    let flux = slab_flux(field, modes);
    field
        .cells
        .iter()
        .enumerate()
        .map(|(c, w)| {
            let beta = beta_star(modes, energy(w, modes)?, w.statistics())?;
            Ok(CellProfile {
                cell: c,
                x: (T::count(c) + T::lit(0.5)) * field.dx,
                temperature: T::one() / beta,
                flux: flux[c],
            })
        })
        .collect()
}

/// Lie splitting: first-order upwind streaming along axis 1, then RK4
/// collisions in every cell. The walls act as ghost cells holding the wall
/// equilibrium, so modes entering the slab are re-emitted thermally.
pub fn evolve_slab<T: Real>(
    field: &SlabField<T>,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
    t_end: T,
    dt: T,
    options: &SlabOptions,
) -> Result<(SlabField<T>, FluxLog<T>)> {
    let modes = triples.modes();
    if field.cells.iter().any(|c| c.grid() != modes.grid()) {
        return Err(Error::Mismatch("slab cells and triples use different grids".into()));
    }
    if !(dt > T::zero()) || !(t_end >= T::zero()) {
        return invalid("need dt > 0 and t_end >= 0");
    }
    let stats = field.statistics();
    let v1: Vec<T> = (0..modes.len()).map(|i| modes.group_velocity(i)[0]).collect();
    let vmax = v1.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let courant = dt * vmax / field.dx;
    if courant > T::lit(0.9) {
        return Err(Error::Cfl(format!("dt max|v1|/dx = {courant} exceeds 0.9")));
    }
    let active: Vec<bool> = (0..modes.len()).map(|i| modes.is_active(i)).collect();
    let left = modes.equilibrium(T::one() / field.temps.0, stats)?.into_values();
    let right = modes.equilibrium(T::one() / field.temps.1, stats)?.into_values();
    let nx = field.cells.len();
    let mut cells: Vec<Vec<T>> = field.cells.iter().map(|c| c.values().to_vec()).collect();
    let rhs = |v: &[T]| collide_values(v, stats, triples, params, options.kernel);
    let steps = (t_end / dt).ceil().to_usize().unwrap_or(0);
    let h = if steps > 0 { t_end / T::count(steps) } else { dt };
    let nu = h / field.dx;
    let mut log = FluxLog::default();
    let snapshot = |cells: &[Vec<T>]| -> Result<SlabField<T>> {
        Ok(SlabField {
            cells: cells
                .iter()
                .map(|v| Occupation::new(modes.grid(), v.clone(), stats))
                .collect::<Result<Vec<_>>>()?,
            dx: field.dx,
            temps: field.temps,
        })
    };
    for n in 1..=steps {
        let old = cells.clone();
        for k in 0..modes.len() {
            if !active[k] || v1[k] == T::zero() {
                continue;
            }
            let c = nu * v1[k];
            for x in 0..nx {
                let upstream = if c > T::zero() {
                    if x == 0 { left[k] } else { old[x - 1][k] }
                } else if x + 1 == nx {
                    right[k]
                } else {
                    old[x + 1][k]
                };
                cells[x][k] = old[x][k] - c.abs() * (old[x][k] - upstream);
            }
        }
        if !triples.is_empty() {
            cells
                .par_iter_mut()
                .map(|v| advance(v, h, &active, options.max_halvings, &rhs, &|_, _| {}).map(|_| ()))
                .collect::<Result<Vec<()>>>()?;
        }
        if n % options.log_every.max(1) == 0 || n == steps {
            let f = snapshot(&cells)?;
            log.t.push(T::count(n) * h);
            log.flux.push(slab_flux(&f, modes));
        }
    }
    Ok((snapshot(&cells)?, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{build_triples, PrefactorKind};
    use crate::lattice::{BrillouinGrid, DispersionModel};
    use rand::Rng;

    fn setup(n: usize, w0: f64) -> TripleList<f64> {
        let m = ModeSet::new(DispersionModel::NextNearestPaper { omega0: w0 }, BrillouinGrid::new(n).unwrap()).unwrap();
        let eta = m.model().default_delta_width(&m.grid());
        build_triples(&m, eta, 3.0, PrefactorKind::OnSite).unwrap()
    }

    #[test]
    fn beta_star_inverts_energy() {
        let t = setup(6, 1.0);
        let m = t.modes();
        for s in [Statistics::Classical, Statistics::Quantum] {
            let w = m.equilibrium(0.7, s).unwrap();
            let b = beta_star(m, energy(&w, m).unwrap(), s).unwrap();
            assert!((b - 0.7).abs() < 1e-10, "{s:?} {b}");
            assert!((fit_beta(&w, m).unwrap() - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_triples_leave_state_unchanged() {
        let m = ModeSet::new(DispersionModel::NearestNeighbor { omega0: 1.0 }, BrillouinGrid::new(6).unwrap()).unwrap();
        let t = build_triples(&m, 0.1, 3.0, PrefactorKind::OnSite).unwrap();
        let w = m.equilibrium(2.0, Statistics::Quantum).unwrap();
        let p = CollisionParams::from_lambda(1.0, 1.0);
        let (log, out) = evolve_homogeneous(&w, &t, &p, 5.0, 0.1, &EvolveOptions::default()).unwrap();
        assert_eq!(out, w);
        assert_eq!(log.t.len(), 2);
    }

    #[test]
    fn relaxation_conserves_energy_and_raises_entropy() {
        let t = setup(6, 1.0);
        let m = t.modes();
        let p = CollisionParams::from_lambda(1.0, 1.0);
        let mut r = crate::rng::stream(1, 0);
        let v = (0..m.len()).map(|_| 0.1 + r.random::<f64>()).collect();
        let w = Occupation::new(m.grid(), v, Statistics::Quantum).unwrap();
        let rho = jacobian_radius(&w, &t, &p, Kernel::Conservative, 20);
        let dt = 1.0 / rho;
        let (log, _) = evolve_homogeneous(&w, &t, &p, 50.0 * dt, dt, &EvolveOptions::default()).unwrap();
        let e0 = log.energy[0];
        assert!(log.energy.iter().all(|e| ((e - e0) / e0).abs() < 1e-12));
        assert!(log.entropy.windows(2).all(|s| s[1] >= s[0] - 1e-12));
        assert!(log.sigma.iter().all(|&s| s >= 0.0));
        assert!(log.dist_to_eq.last().unwrap() < &log.dist_to_eq[0]);
    }

    #[test]
    fn slab_rejects_cfl_violation_and_keeps_equilibrium() {
        let t = setup(4, 1.0);
        let m = t.modes();
        let p = CollisionParams::from_lambda(0.5, 1.0);
        let f = SlabField::linear_profile(m, 4, 1.0, (1.0, 1.0), Statistics::Classical).unwrap();
        assert!(matches!(evolve_slab(&f, &t, &p, 1.0, 1.0, &SlabOptions::default()), Err(Error::Cfl(_))));
        let (g, _) = evolve_slab(&f, &t, &p, 0.5, 0.05, &SlabOptions::default()).unwrap();
        for (a, b) in g.cells.iter().zip(&f.cells) {
            assert!(max_dist(a.values(), b.values()) < 1e-12);
        }
        assert!(slab_flux(&g, m).iter().all(|j| j.abs() < 1e-12));
    }

    #[test]
    fn free_streaming_translates_a_single_mode() {
        let m = ModeSet::new(DispersionModel::NearestNeighbor { omega0: 1.0 }, BrillouinGrid::new(4).unwrap()).unwrap();
        let t = build_triples(&m, 0.1, 3.0, PrefactorKind::OnSite).unwrap();
        let p = CollisionParams::from_lambda(1.0, 1.0);
        let k = m.grid().index([1, 0, 0]);
        let v1 = m.group_velocity(k)[0];
        assert!(v1 > 0.0);
        let nx = 40;
        let dx = 1.0;
        let mut f = SlabField::linear_profile(&m, nx, dx, (1.0, 1.0), Statistics::Classical).unwrap();
        let eq = f.cells[0].values()[k];
        for (x, c) in f.cells.iter_mut().enumerate() {
            let mut v = c.values().to_vec();
            v[k] = eq * if (5..10).contains(&x) { 2.0 } else { 1.0 };
            *c = Occupation::new(m.grid(), v, Statistics::Classical).unwrap();
        }
        let dt = 0.5 * dx / v1;
        let t_end = 20.0 * dt;
        let (g, _) = evolve_slab(&f, &t, &p, t_end, dt, &SlabOptions::default()).unwrap();
        let centre = |fld: &SlabField<f64>| {
            let (mut s, mut sw) = (0.0, 0.0);
            for (x, c) in fld.cells.iter().enumerate() {
                let ex = c.values()[k] - eq;
                s += ex * x as f64;
                sw += ex;
            }
            s / sw
        };
        let shift = (centre(&g) - centre(&f)) * dx;
        assert!((shift - v1 * t_end).abs() < 1e-9, "{shift} vs {}", v1 * t_end);
    }
}
