//! Lattice harmonics: Brillouin grid, dispersion relations and the
//! structural diagnostics (resonances, density of states, critical points).
//!
//! Wave vectors live on the unit torus `T³ = [0,1)³`. The frequency of a
//! lattice model is `ω(k) = (ω₀² + α̂(k))^½` with
//! `α̂(k) = Σₓ α(x) cos(2π k·x)`.

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::scalar::{mollified_delta, norm, Real, Vec3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Uniform `N³` discretization of the torus with points `n/N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BrillouinGrid {
    n: usize,
}

impl BrillouinGrid {
    pub fn new(n: usize) -> Result<Self> {
        if !(2..=256).contains(&n) {
            return invalid(format!("grid size N={n} outside [2, 256]"));
        }
        Ok(Self { n })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of grid points `N³`.
    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.n + c[1]) * self.n + c[2]
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let n = self.n;
        [i / (n * n), (i / n) % n, i % n]
    }

    pub fn k<T: Real>(&self, i: usize) -> Vec3<T> {
        let c = self.coords(i);
        let n = T::count(self.n);
        [T::count(c[0]) / n, T::count(c[1]) / n, T::count(c[2]) / n]
    }

    /// Index of `k_i + k_j mod 1`.
    #[inline]
    pub fn add(&self, i: usize, j: usize) -> usize {
        let (a, b) = (self.coords(i), self.coords(j));
        self.index([
            (a[0] + b[0]) % self.n,
            (a[1] + b[1]) % self.n,
            (a[2] + b[2]) % self.n,
        ])
    }

    /// Index of `k_i − k_j mod 1`.
    #[inline]
    pub fn sub(&self, i: usize, j: usize) -> usize {
        let (a, b) = (self.coords(i), self.coords(j));
        let n = self.n;
        self.index([(a[0] + n - b[0]) % n, (a[1] + n - b[1]) % n, (a[2] + n - b[2]) % n])
    }

    #[inline]
    pub fn neg(&self, i: usize) -> usize {
        self.sub(0, i)
    }

    /// Umklapp vector `n` of `k_i + k_j = k_l + n`, packed as three bits.
    #[inline]
    pub fn umklapp(&self, i: usize, j: usize) -> u8 {
        let (a, b) = (self.coords(i), self.coords(j));
        let mut bits = 0u8;
        for d in 0..3 {
            if a[d] + b[d] >= self.n {
                bits |= 1 << d;
            }
        }
        bits
    }
}

/// Finite coupling table `x ↦ α(x)` of a custom harmonic lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<([i32; 3], T)>", into = "Vec<([i32; 3], T)>")]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>", serialize = "T: Clone + Serialize"))]
pub struct Couplings<T> {
    entries: Vec<([i32; 3], T)>,
}

impl<T: Real> TryFrom<Vec<([i32; 3], T)>> for Couplings<T> {
    type Error = Error;

    fn try_from(entries: Vec<([i32; 3], T)>) -> Result<Self> {
        Self::new(entries)
    }
}

impl<T> From<Couplings<T>> for Vec<([i32; 3], T)> {
    fn from(c: Couplings<T>) -> Self {
        c.entries
    }
}

impl<T: Real> Couplings<T> {
    /// Validates `α(x) = α(−x)` and `Σ α(x) = 0`.
    pub fn new(entries: Vec<([i32; 3], T)>) -> Result<Self> {
        let scale = entries.iter().fold(T::zero(), |s, e| s + e.1.abs());
        if scale == T::zero() {
            return invalid("coupling table is empty or identically zero");
        }
        let tol = T::lit(1e-10) * scale;
        for (x, a) in &entries {
            let mirror = [-x[0], -x[1], -x[2]];
            let b = entries
                .iter()
                .find(|(y, _)| *y == mirror)
                .map(|e| e.1)
                .ok_or_else(|| {
                    Error::InvalidParameter(format!("coupling at {x:?} has no mirror entry"))
                })?;
            if (*a - b).abs() > tol {
                return invalid(format!("coupling not symmetric at {x:?}"));
            }
        }
        let sum = entries.iter().fold(T::zero(), |s, e| s + e.1);
        if sum.abs() > tol {
            return invalid(format!("couplings must sum to zero (sum = {sum})"));
        }
        Ok(Self { entries })
    }

    /// Parses lines `x1 x2 x3 alpha`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return invalid(format!("coupling line {}: expected 4 fields", lineno + 1));
            }
            let mut x = [0i32; 3];
            for d in 0..3 {
                x[d] = fields[d].parse().map_err(|_| {
                    Error::InvalidParameter(format!("coupling line {}: bad integer", lineno + 1))
                })?;
            }
            let a: f64 = fields[3].parse().map_err(|_| {
                Error::InvalidParameter(format!("coupling line {}: bad value", lineno + 1))
            })?;
            entries.push((x, T::lit(a)));
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[([i32; 3], T)] {
        &self.entries
    }

    fn phase(x: &[i32; 3], k: &Vec3<T>) -> T {
        T::two_pi()
            * (T::lit(x[0] as f64) * k[0] + T::lit(x[1] as f64) * k[1] + T::lit(x[2] as f64) * k[2])
    }

    pub fn alpha_hat(&self, k: &Vec3<T>) -> T {
        self.entries.iter().fold(T::zero(), |s, (x, a)| s + *a * Self::phase(x, k).cos())
    }

    fn alpha_hat_grad(&self, k: &Vec3<T>) -> Vec3<T> {
        let mut g = [T::zero(); 3];
        for (x, a) in &self.entries {
            let s = *a * Self::phase(x, k).sin() * T::two_pi();
            for d in 0..3 {
                g[d] = g[d] - s * T::lit(x[d] as f64);
            }
        }
        g
    }

    fn alpha_hat_hessian(&self, k: &Vec3<T>) -> [[T; 3]; 3] {
        let mut h = [[T::zero(); 3]; 3];
        let c2 = T::two_pi() * T::two_pi();
        for (x, a) in &self.entries {
            let c = *a * Self::phase(x, k).cos() * c2;
            for p in 0..3 {
                for q in 0..3 {
                    h[p][q] = h[p][q] - c * T::lit(x[p] as f64) * T::lit(x[q] as f64);
                }
            }
        }
        h
    }
}

/// Dispersion relation of the scalar lattice (or continuum) model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>", serialize = "T: Clone + Serialize"))]
pub enum DispersionModel<T> {
    /// `ω = (ω₀² + 2Σ(1 − cos 2πkʲ))^½`.
    NearestNeighbor { omega0: T },
    /// `ω = ω₀ + 2Σ(1 − cos 2πkʲ)`.
    NextNearestPaper { omega0: T },
    CustomCouplings { omega0: T, couplings: Couplings<T> },
    /// `ω = |k|` on ℝ³.
    ContinuumLinear,
    /// `ω = (ω₀² + |k|²)^½` on ℝ³.
    ContinuumKleinGordon { omega0: T },
}

impl<T: Real> DispersionModel<T> {
    pub fn omega0(&self) -> T {
        match self {
            Self::NearestNeighbor { omega0 }
            | Self::NextNearestPaper { omega0 }
            | Self::CustomCouplings { omega0, .. }
            | Self::ContinuumKleinGordon { omega0 } => *omega0,
            Self::ContinuumLinear => T::zero(),
        }
    }

    pub fn is_lattice(&self) -> bool {
        !matches!(self, Self::ContinuumLinear | Self::ContinuumKleinGordon { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::NearestNeighbor { .. } => "nearest_neighbor",
            Self::NextNearestPaper { .. } => "next_nearest_paper",
            Self::CustomCouplings { .. } => "custom_couplings",
            Self::ContinuumLinear => "continuum_linear",
            Self::ContinuumKleinGordon { .. } => "continuum_klein_gordon",
        }
    }

    /// Checks the model invariants, including mechanical stability of custom tables.
    pub fn validate(&self) -> Result<()> {
        let w0 = self.omega0();
        if !(w0 >= T::zero()) || !w0.is_finite() {
            return invalid(format!("omega0 must be finite and nonnegative, got {w0}"));
        }
        if let Self::CustomCouplings { omega0, couplings } = self {
            let probe = 8;
            let p = T::count(probe);
            let mut worst: Option<(Vec3<T>, T)> = None;
            for n1 in 0..probe {
                for n2 in 0..probe {
                    for n3 in 0..probe {
                        if n1 + n2 + n3 == 0 {
                            continue;
                        }
                        let k = [T::count(n1) / p, T::count(n2) / p, T::count(n3) / p];
                        let ah = couplings.alpha_hat(&k);
                        if worst.map_or(true, |w| ah < w.1) {
                            worst = Some((k, ah));
                        }
                    }
                }
            }
            if let Some((k, ah)) = worst {
                if ah < -(*omega0 * *omega0) {
                    return Err(Error::Stability(format!("alpha_hat({k:?}) = {ah} below -omega0^2")));
                }
                if ah <= T::zero() {
                    return invalid(format!("alpha_hat({k:?}) = {ah} not positive"));
                }
            }
        }
        Ok(())
    }

    fn nn_sum(k: &Vec3<T>) -> T {
        let two = T::lit(2.0);
        k.iter().fold(T::zero(), |s, &x| s + two * (T::one() - (T::two_pi() * x).cos()))
    }

    pub fn omega(&self, k: &Vec3<T>) -> T {
        match self {
            Self::NearestNeighbor { omega0 } => (*omega0 * *omega0 + Self::nn_sum(k)).sqrt(),
            Self::NextNearestPaper { omega0 } => *omega0 + Self::nn_sum(k),
            Self::CustomCouplings { omega0, couplings } => {
                (*omega0 * *omega0 + couplings.alpha_hat(k)).max(T::zero()).sqrt()
            }
            Self::ContinuumLinear => norm(k),
            Self::ContinuumKleinGordon { omega0 } => {
                (*omega0 * *omega0 + k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt()
            }
        }
    }

    /// `∇ω(k)`; the direction is undefined at `k = 0` for `ContinuumLinear`.
    /// At a zero of ω the gradient of a square-root dispersion is set to zero.
    pub fn gradient(&self, k: &Vec3<T>) -> Result<Vec3<T>> {
        let four_pi = T::lit(2.0) * T::two_pi();
        let g = match self {
            Self::NearestNeighbor { .. } => {
                let w = self.omega(k);
                if w == T::zero() {
                    [T::zero(); 3]
                } else {
                    k.map(|x| four_pi * (T::two_pi() * x).sin() / (T::lit(2.0) * w))
                }
            }
            Self::NextNearestPaper { .. } => k.map(|x| four_pi * (T::two_pi() * x).sin()),
            Self::CustomCouplings { couplings, .. } => {
                let w = self.omega(k);
                if w == T::zero() {
                    [T::zero(); 3]
                } else {
                    couplings.alpha_hat_grad(k).map(|a| a / (T::lit(2.0) * w))
                }
            }
            Self::ContinuumLinear => {
                let r = norm(k);
                if r == T::zero() {
                    return Err(Error::Domain(
                        "group velocity direction undefined at k = 0 for omega = |k|".into(),
                    ));
                }
                k.map(|x| x / r)
            }
            Self::ContinuumKleinGordon { .. } => {
                let w = self.omega(k);
                k.map(|x| x / w)
            }
        };
        Ok(g)
    }

    /// Group velocity `(2π)⁻¹ ∇ω(k)`.
    pub fn group_velocity(&self, k: &Vec3<T>) -> Result<Vec3<T>> {
        Ok(self.gradient(k)?.map(|g| g / T::two_pi()))
    }

    /// Analytic Hessian of ω.
    pub fn hessian(&self, k: &Vec3<T>) -> Result<[[T; 3]; 3]> {
        let mut h = [[T::zero(); 3]; 3];
        let c2 = T::lit(2.0) * T::two_pi() * T::two_pi();
        match self {
            Self::NextNearestPaper { .. } => {
                for d in 0..3 {
                    h[d][d] = c2 * (T::two_pi() * k[d]).cos();
                }
            }
            Self::NearestNeighbor { .. } | Self::CustomCouplings { .. } => {
                // ω² = ω₀² + A(k): ∂ᵢⱼω = (Aᵢⱼ − 2∂ᵢω∂ⱼω) / 2ω.
                let w = self.omega(k);
                if w == T::zero() {
                    return Err(Error::Domain("Hessian undefined where omega = 0".into()));
                }
                let g = self.gradient(k)?;
                let a = match self {
                    Self::CustomCouplings { couplings, .. } => couplings.alpha_hat_hessian(k),
                    _ => {
                        let mut a = [[T::zero(); 3]; 3];
                        for d in 0..3 {
                            a[d][d] = c2 * (T::two_pi() * k[d]).cos();
                        }
                        a
                    }
                };
                for p in 0..3 {
                    for q in 0..3 {
                        h[p][q] = (a[p][q] - T::lit(2.0) * g[p] * g[q]) / (T::lit(2.0) * w);
                    }
                }
            }
            Self::ContinuumLinear | Self::ContinuumKleinGordon { .. } => {
                let w = self.omega(k);
                if w == T::zero() {
                    return Err(Error::Domain("Hessian undefined at k = 0".into()));
                }
                let g = self.gradient(k)?;
                for p in 0..3 {
                    for q in 0..3 {
                        let id = if p == q { T::one() } else { T::zero() };
                        h[p][q] = (id - g[p] * g[q]) / w;
                    }
                }
            }
        }
        Ok(h)
    }

    /// Resonance defect `E_q(k) = ω(k) + ω(q) − ω(k+q)`.
    pub fn resonance_defect(&self, k: &Vec3<T>, q: &Vec3<T>) -> T {
        let s = [k[0] + q[0], k[1] + q[1], k[2] + q[2]];
        self.omega(k) + self.omega(q) - self.omega(&s)
    }

    /// Largest group speed over the grid points.
    pub fn max_group_speed(&self, grid: &BrillouinGrid) -> T {
        (0..grid.len())
            .filter_map(|i| self.group_velocity(&grid.k(i)).ok())
            .map(|v| norm(&v))
            .fold(T::zero(), T::max)
    }

    /// Default mollifier width `2·max|v|/N`, with `v` the group velocity.
    pub fn default_delta_width(&self, grid: &BrillouinGrid) -> T {
        T::lit(2.0) * self.max_group_speed(grid) / T::count(grid.n())
    }
}

fn det3<T: Real>(h: &[[T; 3]; 3]) -> T {
    h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1]) - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
        + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0])
}

fn solve3<T: Real>(h: &[[T; 3]; 3], b: &Vec3<T>) -> Option<Vec3<T>> {
    let d = det3(h);
    if d == T::zero() || !d.is_finite() {
        return None;
    }
    let mut x = [T::zero(); 3];
    for c in 0..3 {
        let mut m = *h;
        for r in 0..3 {
            m[r][c] = b[r];
        }
        x[c] = det3(&m) / d;
    }
    Some(x)
}

/// Summary of a Monte Carlo scan of the resonance defect.
#[derive(Clone, Debug, Serialize)]
pub struct ResonanceReport<T> {
    pub min_defect: T,
    pub fraction_negative: T,
    /// Estimate of `∫∫ dk dq δ_η(E_q(k))`.
    pub resonance_measure: T,
    /// `sup_q ∫ dk δ_η(E_q(k))` over the sampled `q`.
    pub e_max_estimate: T,
    pub delta_width: T,
    pub samples: usize,
}

/// Monte Carlo scan over random `(k, q)` pairs.
///
/// Samples are organised in 64 groups sharing one `q`; each group has its own
/// random stream. The mollifier is cut off at `|E| ≤ 3η`, and `η` defaults to
/// 2% of the bandwidth measured on a 16³ probe grid.
pub fn resonance_scan<T: Real>(
    model: &DispersionModel<T>,
    sample_count: usize,
    seed: u64,
    delta_width: Option<T>,
) -> Result<ResonanceReport<T>> {
    if sample_count < 1000 {
        return invalid("resonance_scan needs at least 1000 samples");
    }
    model.validate()?;
    let eta = match delta_width {
        Some(e) if e > T::zero() => e,
        Some(_) => return invalid("delta_width must be positive"),
        None => {
            let probe = BrillouinGrid::new(16)?;
            let (lo, hi) = (0..probe.len()).map(|i| model.omega(&probe.k(i))).fold(
                (T::infinity(), T::neg_infinity()),
                |(lo, hi), w| (lo.min(w), hi.max(w)),
            );
            T::lit(0.02) * (hi - lo).max(T::lit(1e-3))
        }
    };
    let groups = 64usize;
    let offset = if model.is_lattice() { T::zero() } else { T::lit(0.5) };
    let draw = |r: &mut rand_chacha::ChaCha8Rng| -> Vec3<T> {
        [0, 1, 2].map(|_| T::lit(r.random::<f64>()) - offset)
    };
    let mut min_defect = T::infinity();
    let mut negative = 0usize;
    let mut measure = T::zero();
    let mut e_max = T::zero();
    for g in 0..groups {
        let per = sample_count / groups + usize::from(g < sample_count % groups);
        let mut r = rng::stream(seed, g as u64);
        let q = draw(&mut r);
        let mut acc = T::zero();
        for _ in 0..per {
            let k = draw(&mut r);
            let e = model.resonance_defect(&k, &q);
            min_defect = min_defect.min(e);
            if e < T::zero() {
                negative += 1;
            }
            if e.abs() <= T::lit(3.0) * eta {
                acc = acc + mollified_delta(e, eta);
            }
        }
        measure = measure + acc;
        if per > 0 {
            e_max = e_max.max(acc / T::count(per));
        }
    }
    Ok(ResonanceReport {
        min_defect,
        fraction_negative: T::count(negative) / T::count(sample_count),
        resonance_measure: measure / T::count(sample_count),
        e_max_estimate: e_max,
        delta_width: eta,
        samples: sample_count,
    })
}

/// Tabulated density of states `τ(ω) = ∫dk δ(ω − ω(k))`.
#[derive(Clone, Debug, Serialize)]
pub struct DosTable<T> {
    pub omega: Vec<T>,
    pub tau: Vec<T>,
    pub delta_width: T,
    /// Set when `η` is below the largest gap between consecutive grid frequencies.
    pub undersmoothed: bool,
}

impl<T: Real> DosTable<T> {
    /// Linear interpolation on the table (zero outside).
    pub fn eval(&self, w: T) -> T {
        let n = self.omega.len();
        if n < 2 || w < self.omega[0] || w > self.omega[n - 1] {
            return T::zero();
        }
        let h = self.omega[1] - self.omega[0];
        let x = (w - self.omega[0]) / h;
        let i = x.floor().to_usize().unwrap_or(0).min(n - 2);
        let f = x - T::count(i);
        self.tau[i] * (T::one() - f) + self.tau[i + 1] * f
    }

    /// Trapezoidal `∫ τ dω`.
    pub fn integral(&self) -> T {
        self.moment(0)
    }

    /// Trapezoidal `∫ ωᵖ τ dω`.
    pub fn moment(&self, p: i32) -> T {
        let n = self.omega.len();
        if n < 2 {
            return T::zero();
        }
        let h = self.omega[1] - self.omega[0];
        let f = |i: usize| self.omega[i].powi(p) * self.tau[i];
        let inner = (1..n - 1).fold(T::zero(), |s, i| s + f(i));
        h * (inner + (f(0) + f(n - 1)) / T::lit(2.0))
    }
}

/// Exact mollified grid sum `(1/N³) Σ_k δ_η(ω − ω(k))`.
pub fn tau_direct<T: Real>(model: &DispersionModel<T>, grid: &BrillouinGrid, eta: T, w: T) -> T {
    let m = grid.len();
    let s = (0..m).fold(T::zero(), |s, i| s + mollified_delta(w - model.omega(&grid.k(i)), eta));
    s / T::count(m)
}

/// Density of states on a uniform ω-axis with spacing `η/8`.
pub fn density_of_states<T: Real>(
    model: &DispersionModel<T>,
    grid: &BrillouinGrid,
    delta_width: T,
) -> Result<DosTable<T>> {
    if !(delta_width > T::zero()) {
        return invalid("delta_width must be positive");
    }
    model.validate()?;
    let m = grid.len();
    let mut w: Vec<T> = (0..m).map(|i| model.omega(&grid.k(i))).collect();
    w.sort_by(|a, b| a.partial_cmp(b).expect("finite frequencies"));
    let max_gap = w.windows(2).fold(T::zero(), |g, p| g.max(p[1] - p[0]));
    let six = T::lit(6.0) * delta_width;
    let lo = w[0] - six;
    let hi = w[m - 1] + six;
    let h = delta_width / T::lit(8.0);
    let count = ((hi - lo) / h).ceil().to_usize().unwrap_or(0) + 1;
    let cut = T::lit(8.0) * delta_width;
    let mut tau = vec![T::zero(); count];
    let axis: Vec<T> = (0..count).map(|j| lo + T::count(j) * h).collect();
    // Each frequency only touches axis points within 8η.
    for &wk in &w {
        let first = ((wk - cut - lo) / h).floor().max(T::zero()).to_usize().unwrap_or(0);
        let last = (((wk + cut - lo) / h).ceil().to_usize().unwrap_or(0)).min(count - 1);
        for j in first..=last {
            tau[j] = tau[j] + mollified_delta(axis[j] - wk, delta_width);
        }
    }
    let mf = T::count(m);
    for t in &mut tau {
        *t = *t / mf;
    }
    Ok(DosTable { omega: axis, tau, delta_width, undersmoothed: delta_width < max_gap })
}

/// A nondegenerate or degenerate critical point of ω.
#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint<T> {
    pub k: Vec3<T>,
    pub hessian_det: T,
    /// Number of negative Hessian eigenvalues (by sign of leading minors).
    pub index: usize,
    pub degenerate: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MorseReport<T> {
    pub critical_points: Vec<CriticalPoint<T>>,
    /// Grid points where `|det Hess ω|` is below `10⁻³·max|det Hess ω|`.
    pub low_determinant_points: Vec<usize>,
}

impl<T: Real> MorseReport<T> {
    pub fn critical_count(&self) -> usize {
        self.critical_points.len()
    }

    pub fn degenerate_count(&self) -> usize {
        self.critical_points.iter().filter(|c| c.degenerate).count()
    }
}

fn wrap_torus<T: Real>(x: T) -> T {
    x - x.floor()
}

fn torus_distance<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    let mut s = T::zero();
    for d in 0..3 {
        let mut x = (a[d] - b[d]).abs();
        x = x - x.floor();
        x = x.min(T::one() - x);
        s = s + x * x;
    }
    s.sqrt()
}

/// Locates the critical points of ω by Newton refinement from every grid point.
///
/// Lattice models are searched on the torus; continuum models on the cube
/// `[−½, ½)³`. A point counts as critical when `|∇ω| < 10⁻⁸`.
pub fn morse_diagnostic<T: Real>(
    model: &DispersionModel<T>,
    grid: &BrillouinGrid,
) -> Result<MorseReport<T>> {
    model.validate()?;
    if let DispersionModel::NearestNeighbor { omega0 } = model {
        if *omega0 <= T::zero() {
            return invalid("Morse diagnostic needs omega0 > 0 for nearest-neighbor coupling");
        }
    }
    let lattice = model.is_lattice();
    let shift = if lattice { T::zero() } else { T::lit(0.5) };
    let n = grid.len();
    let step_cap = T::one() / T::count(2 * grid.n());
    let tol = T::lit(1e-8);
    let mut found: Vec<CriticalPoint<T>> = Vec::new();
    let mut dets = Vec::with_capacity(n);
    for i in 0..n {
        let k0 = grid.k::<T>(i).map(|x| x - shift);
        dets.push(model.hessian(&k0).map(|h| det3(&h).abs()).unwrap_or(T::zero()));
        let mut k = k0;
        let mut converged = false;
        for _ in 0..60 {
            let g = match model.gradient(&k) {
                Ok(g) => g,
                Err(_) => break,
            };
            if norm(&g) < tol {
                converged = true;
                break;
            }
            let h = match model.hessian(&k) {
                Ok(h) => h,
                Err(_) => break,
            };
            let Some(mut dx) = solve3(&h, &g) else { break };
            let len = norm(&dx);
            if len > step_cap {
                dx = dx.map(|x| x * step_cap / len);
            }
            for d in 0..3 {
                k[d] = k[d] - dx[d];
            }
            if lattice {
                k = k.map(wrap_torus);
            }
        }
        if !converged {
            continue;
        }
        let duplicate = found.iter().any(|c| {
            let dist = if lattice {
                torus_distance(&c.k, &k)
            } else {
                norm(&[c.k[0] - k[0], c.k[1] - k[1], c.k[2] - k[2]])
            };
            dist < T::lit(1e-6)
        });
        if duplicate {
            continue;
        }
        let h = model.hessian(&k)?;
        let det = det3(&h);
        let scale = h.iter().flatten().fold(T::zero(), |m, x| m.max(x.abs()));
        let degenerate = det.abs() <= T::lit(1e-8) * scale * scale * scale;
        // Sylvester: count sign changes along the leading principal minors.
        let m1 = h[0][0];
        let m2 = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let minors = [T::one(), m1, m2, det];
        let index = minors.windows(2).filter(|p| p[0] * p[1] < T::zero()).count();
        found.push(CriticalPoint { k, hessian_det: det, index, degenerate });
    }
    let max_det = dets.iter().fold(T::zero(), |m, &d| m.max(d));
    let low_determinant_points =
        (0..n).filter(|&i| dets[i] < T::lit(1e-3) * max_det).collect();
    Ok(MorseReport { critical_points: found, low_determinant_points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nn(w0: f64) -> DispersionModel<f64> {
        DispersionModel::NearestNeighbor { omega0: w0 }
    }

    fn nnn(w0: f64) -> DispersionModel<f64> {
        DispersionModel::NextNearestPaper { omega0: w0 }
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(nn(1.0).omega(&[0.0; 3]), 1.0);
        assert!((nn(0.0).omega(&[0.5; 3]) - 12f64.sqrt()).abs() < 1e-12);
        let expect = 1.0 + 6.0 - 3.0 * 2f64.sqrt();
        assert!((nnn(1.0).omega(&[0.125; 3]) - expect).abs() < 1e-12);
    }

    #[test]
    fn group_velocity_examples() {
        let v = nnn(1.0).group_velocity(&[0.25, 0.0, 0.0]).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12 && v[1].abs() < 1e-12 && v[2].abs() < 1e-12);
        assert_eq!(nn(1.0).group_velocity(&[0.0; 3]).unwrap(), [0.0; 3]);
        assert!(DispersionModel::<f64>::ContinuumLinear.group_velocity(&[0.0; 3]).is_err());
    }

    #[test]
    fn defect_examples() {
        let m = nnn(1.0);
        let e = m.resonance_defect(&[0.125; 3], &[0.25; 3]);
        assert!((e - (1.0 - 6.0 * (2f64.sqrt() - 1.0))).abs() < 1e-12);
        for w0 in [0.0, 0.7] {
            let e0 = nnn(w0).resonance_defect(&[0.0; 3], &[0.3, 0.1, 0.9]);
            assert!((e0 - w0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_arithmetic() {
        let g = BrillouinGrid::new(5).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index(g.coords(i)), i);
            assert_eq!(g.add(i, g.neg(i)), 0);
            for j in [0, 7, 124] {
                assert_eq!(g.sub(g.add(i, j), j), i);
            }
        }
        assert!(BrillouinGrid::new(1).is_err());
    }

    #[test]
    fn default_width_uses_group_speed() {
        let g = BrillouinGrid::new(16).unwrap();
        let eta = nnn(1.0).default_delta_width(&g);
        assert!((eta - 2.0 * 2.0 * 3f64.sqrt() / 16.0).abs() < 1e-12);
    }

    #[test]
    fn custom_couplings_reproduce_nearest_neighbor() {
        let text = "0 0 0 6\n1 0 0 -1\n-1 0 0 -1\n0 1 0 -1\n0 -1 0 -1\n0 0 1 -1\n0 0 -1 -1\n";
        let c = Couplings::<f64>::parse(text).unwrap();
        let m = DispersionModel::CustomCouplings { omega0: 1.0, couplings: c };
        m.validate().unwrap();
        let k = [0.13, 0.71, 0.4];
        assert!((m.omega(&k) - nn(1.0).omega(&k)).abs() < 1e-12);
        let (ga, gb) = (m.gradient(&k).unwrap(), nn(1.0).gradient(&k).unwrap());
        let (ha, hb) = (m.hessian(&k).unwrap(), nn(1.0).hessian(&k).unwrap());
        for p in 0..3 {
            assert!((ga[p] - gb[p]).abs() < 1e-10);
            for q in 0..3 {
                assert!((ha[p][q] - hb[p][q]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn custom_couplings_rejects_bad_tables() {
        assert!(Couplings::<f64>::parse("1 0 0 -1\n0 0 0 1\n").is_err());
        assert!(Couplings::<f64>::parse("0 0 0 2\n1 0 0 -1\n-1 0 0 -1\n0 1 0 1\n0 -1 0 1\n")
            .is_err());
        let unstable = Couplings::<f64>::new(vec![
            ([0, 0, 0], -2.0),
            ([1, 0, 0], 1.0),
            ([-1, 0, 0], 1.0),
        ])
        .unwrap();
        let m = DispersionModel::CustomCouplings { omega0: 0.5, couplings: unstable };
        assert!(matches!(m.validate(), Err(Error::Stability(_))));
    }

    #[test]
    fn scan_is_deterministic_and_finds_negative_defects() {
        let a = resonance_scan(&nnn(1.0), 20_000, 9, None).unwrap();
        let b = resonance_scan(&nnn(1.0), 20_000, 9, None).unwrap();
        assert_eq!(a.min_defect, b.min_defect);
        assert!(a.fraction_negative > 0.0 && a.min_defect < 0.0);
        let c = resonance_scan(&nn(1.0), 20_000, 9, None).unwrap();
        assert_eq!(c.fraction_negative, 0.0);
        assert_eq!(c.resonance_measure, 0.0);
        assert!(c.min_defect >= 0.5);
        let z = resonance_scan(&nnn(0.0), 20_000, 1, None).unwrap();
        assert!(z.min_defect <= 0.0);
    }

    #[test]
    fn dos_normalization_and_support() {
        let g = BrillouinGrid::new(12).unwrap();
        let m = nn(1.0);
        let eta = m.default_delta_width(&g);
        let dos = density_of_states(&m, &g, eta).unwrap();
        assert!((dos.integral() - 1.0).abs() < 1e-3);
        for (w, t) in dos.omega.iter().zip(&dos.tau) {
            if *w < 1.0 - 3.0 * eta {
                assert!(*t < 1e-3);
            }
        }
        let mean: f64 = (0..g.len()).map(|i| m.omega(&g.k(i))).sum::<f64>() / g.len() as f64;
        assert!((dos.moment(1) - mean).abs() < 1e-2);
    }

    #[test]
    fn dos_two_resolutions_agree_midband() {
        let m = nnn(1.0);
        let a = BrillouinGrid::new(16).unwrap();
        let b = BrillouinGrid::new(24).unwrap();
        let ta = density_of_states(&m, &a, m.default_delta_width(&a)).unwrap().eval(7.0);
        let tb = density_of_states(&m, &b, m.default_delta_width(&b)).unwrap().eval(7.0);
        assert!((ta - tb).abs() / tb < 0.05, "{ta} vs {tb}");
    }

    #[test]
    fn morse_counts() {
        let g = BrillouinGrid::new(32).unwrap();
        let r = morse_diagnostic(&nn(1.0), &g).unwrap();
        assert_eq!(r.critical_count(), 8);
        assert_eq!(r.degenerate_count(), 0);
        let s = morse_diagnostic(&nnn(1.0), &g).unwrap();
        assert_eq!(s.critical_count(), 8);
        let mut ka: Vec<_> = r.critical_points.iter().map(|c| c.k.map(|x| (x * 2.0).round() as i32)).collect();
        let mut kb: Vec<_> = s.critical_points.iter().map(|c| c.k.map(|x| (x * 2.0).round() as i32)).collect();
        ka.sort();
        kb.sort();
        assert_eq!(ka, kb);
        let kg = DispersionModel::ContinuumKleinGordon { omega0: 1.0 };
        let r = morse_diagnostic(&kg, &BrillouinGrid::new(8).unwrap()).unwrap();
        assert_eq!(r.critical_count(), 1);
        assert!(norm(&r.critical_points[0].k) < 1e-8);
    }
}
