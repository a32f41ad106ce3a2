//! Isotropic four-wave kinetics on a log-spaced radial grid.
//!
//! Two estimators of the collision integral are provided. The sphere
//! estimator samples `k₁, k₂` in ℝ³ (log-uniform radius, uniform direction),
//! closes momentum with `k₃ = k + k₁ − k₂` and mollifies the frequency delta.
//! The reduced estimator integrates the three solid angles in closed form,
//! which leaves a two-dimensional integral over `|k₁|, |k₂|` with an exact
//! frequency delta. All four wave numbers are restricted to the band.

use crate::error::{invalid, Error, Result};
use crate::lattice::DispersionModel;
use crate::rng;
use crate::scalar::{mollified_delta, norm, Real, Vec3};
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use rayon::prelude::*;

const CHUNK: usize = 1 << 14;

/// Radial spectrum `W(|k|)` with forcing profile `Γ(|k|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TurbulenceSpectrum<T> {
    pub k_min: T,
    pub k_max: T,
    /// Bin centers, uniformly spaced in `ln k`.
    pub k: Vec<T>,
    pub w: Vec<T>,
    pub gamma: Vec<T>,
}

/// Log-spaced bin centers of `bins` equal cells in `ln k` over `[k_min, k_max]`.
pub fn log_grid<T: Real>(k_min: T, k_max: T, bins: usize) -> Result<Vec<T>> {
    if !(k_min > T::zero()) || !(k_max > k_min) || !k_max.is_finite() {
        return invalid(format!("need 0 < k_min < k_max, got [{k_min}, {k_max}]"));
    }
    if bins < 2 {
        return invalid("radial grid needs at least 2 bins");
    }
    let du = (k_max / k_min).ln() / T::count(bins);
    Ok((0..bins)
        .map(|i| (k_min.ln() + (T::count(i) + T::lit(0.5)) * du).exp())
        .collect())
}

impl<T: Real> TurbulenceSpectrum<T> {
    pub fn new(k_min: T, k_max: T, w: Vec<T>, gamma: Vec<T>) -> Result<Self> {
        let k = log_grid(k_min, k_max, w.len())?;
        if gamma.len() != w.len() {
            return Err(Error::Mismatch(format!("{} W values but {} forcing values", w.len(), gamma.len())));
        }
        if w.iter().any(|x| !(*x >= T::zero()) || !x.is_finite()) {
            return invalid("spectrum values must be finite and nonnegative");
        }
        if gamma.iter().any(|x| !x.is_finite()) {
            return invalid("forcing profile must be finite");
        }
        Ok(Self { k_min, k_max, k, w, gamma })
    }

    /// `W = |k|^{−σ}` without forcing.
    pub fn power_law(k_min: T, k_max: T, bins: usize, sigma: T) -> Result<Self> {
        let k = log_grid(k_min, k_max, bins)?;
        let w = k.iter().map(|&x| x.powf(-sigma)).collect();
        Self::new(k_min, k_max, w, vec![T::zero(); bins])
    }

    pub fn bins(&self) -> usize {
        self.k.len()
    }

    /// Cell width in `ln k`.
    pub fn du(&self) -> T {
        (self.k_max / self.k_min).ln() / T::count(self.bins())
    }

    pub fn contains(&self, k: T) -> bool {
        k >= self.k_min && k <= self.k_max
    }

    /// `4π k³ Δ(ln k)`, the volume of each radial shell.
    pub fn shell_volumes(&self) -> Vec<T> {
        let c = T::lit(2.0) * T::two_pi() * self.du();
        self.k.iter().map(|&k| c * k * k * k).collect()
    }

    /// `W(|k|)`: log-log interpolation between bin centers (extrapolated
    /// into the outer half cells), `None` outside the band.
    pub fn interpolate(&self, k: T) -> Option<T> {
        Some(Interp::locate(self, k)?.eval(&self.w))
    }

    /// CSV `kmag,W,stderr`.
    pub fn to_csv(&self, stderr: Option<&[T]>) -> String {
        let mut s = String::from("kmag,W,stderr\n");
        for i in 0..self.bins() {
            let e = stderr.map_or(0.0, |e| e[i].as_f64());
            s.push_str(&format!("{:e},{:e},{:e}\n", self.k[i].as_f64(), self.w[i].as_f64(), e));
        }
        s
    }
}

#[derive(Clone, Copy, Debug)]
struct Interp<T> {
    lo: usize,
    frac: T,
}

impl<T: Real> Interp<T> {
    fn locate(s: &TurbulenceSpectrum<T>, k: T) -> Option<Self> {
        if !s.contains(k) {
            return None;
        }
        let x = (k / s.k[0]).ln() / s.du();
        let lo = x.floor().max(T::zero()).to_usize().unwrap_or(0).min(s.bins() - 2);
        Some(Self { lo, frac: x - T::count(lo) })
    }

    /// As [`Self::eval`] with `ln w` precomputed.
    fn eval_with_logs(&self, w: &[T], lw: &[T]) -> T {
        let (a, b) = (w[self.lo], w[self.lo + 1]);
        if a > T::zero() && b > T::zero() {
            (lw[self.lo] + (lw[self.lo + 1] - lw[self.lo]) * self.frac).exp()
        } else {
            self.eval(w)
        }
    }

    fn eval(&self, w: &[T]) -> T {
        let (a, b) = (w[self.lo], w[self.lo + 1]);
        if a > T::zero() && b > T::zero() {
            (a.ln() * (T::one() - self.frac) + b.ln() * self.frac).exp()
        } else {
            let f = self.frac.max(T::zero()).min(T::one());
            a * (T::one() - f) + b * f
        }
    }
}

fn radial_omega<T: Real>(model: &DispersionModel<T>, k: T) -> T {
    model.omega(&[k, T::zero(), T::zero()])
}

fn check_continuum<T: Real>(model: &DispersionModel<T>) -> Result<()> {
    if model.is_lattice() {
        return invalid(format!("four-wave kinetics needs a continuum model, got {}", model.name()));
    }
    model.validate()
}

/// `9π/4 · λ² (2π)⁻³`.
pub fn fourwave_prefactor<T: Real>(lambda: T) -> T {
    T::lit(9.0) * T::PI() / T::lit(4.0) * lambda * lambda / T::two_pi().powi(3)
}

/// `∫₀^∞ sin(ax) sin(bx) sin(cx) sin(dx) x⁻² dx` for `a, b, c, d ≥ 0`.
///
/// Together with `(2π)⁻³(4π)⁴/(abcd)` this is the solid-angle integral of
/// `δ³(k + k₁ − k₂ − k₃)` at fixed magnitudes.
pub fn angular_kernel<T: Real>(a: T, b: T, c: T, d: T) -> T {
    let mut s = T::zero();
    for e2 in [T::one(), -T::one()] {
        for e3 in [T::one(), -T::one()] {
            for e4 in [T::one(), -T::one()] {
                s = s + e2 * e3 * e4 * (a + e2 * b + e3 * c + e4 * d).abs();
            }
        }
    }
    -T::PI() / T::lit(16.0) * s
}

/// `W₁W₂W₃ + W(W₂W₃ − W₁W₃ − W₁W₂)`.
#[inline]
pub fn quartic_bracket<T: Real>(w: T, w1: T, w2: T, w3: T) -> T {
    w1 * w2 * w3 + w * (w2 * w3 - w1 * w3 - w1 * w2)
}

/// Largest term of the bracket, used to make residuals relative.
fn bracket_scale<T: Real>(w: T, w1: T, w2: T, w3: T) -> T {
    (w1 * w2 * w3).abs().max((w * w2 * w3).abs()).max((w * w1 * w3).abs()).max((w * w1 * w2).abs())
}

/// Monte Carlo collision integral per radial bin with number and energy budgets.
#[derive(Clone, Debug)]
pub struct FourWaveEstimate<T> {
    pub k: Vec<T>,
    pub value: Vec<T>,
    pub stderr: Vec<T>,
    pub samples: usize,
    /// Mollifier width per bin (zero for the reduced estimator).
    pub eta: Vec<T>,
    /// Importance weighting of the samples, for output metadata.
    pub weighting: &'static str,
    pub number_sum: T,
    pub number_stderr: T,
    pub energy_sum: T,
    pub energy_stderr: T,
}

impl<T: Real> FourWaveEstimate<T> {
    fn assemble(
        s: &TurbulenceSpectrum<T>,
        model: &DispersionModel<T>,
        stats: Vec<(T, T)>,
        samples: usize,
        eta: Vec<T>,
        weighting: &'static str,
    ) -> Self {
        let vol = s.shell_volumes();
        let (value, stderr): (Vec<T>, Vec<T>) = stats.into_iter().unzip();
        let mut ns = T::zero();
        let mut nv = T::zero();
        let mut es = T::zero();
        let mut ev = T::zero();
        for i in 0..s.bins() {
            let om = radial_omega(model, s.k[i]);
            ns = ns + vol[i] * value[i];
            nv = nv + (vol[i] * stderr[i]).powi(2);
            es = es + om * vol[i] * value[i];
            ev = ev + (om * vol[i] * stderr[i]).powi(2);
        }
        Self {
            k: s.k.clone(),
            value,
            stderr,
            samples,
            eta,
            weighting,
            number_sum: ns,
            number_stderr: nv.sqrt(),
            energy_sum: es,
            energy_stderr: ev.sqrt(),
        }
    }

    /// CSV `kmag,dW,stderr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kmag,dW,stderr\n");
        for i in 0..self.k.len() {
            s.push_str(&format!("{:e},{:e},{:e}\n", self.k[i].as_f64(), self.value[i].as_f64(), self.stderr[i].as_f64()));
        }
        s
    }
}

/// Mean and standard error from running sums.
fn mean_stderr<T: Real>(sum: T, sum2: T, n: usize) -> (T, T) {
    let nf = T::count(n);
    let mean = sum / nf;
    let var = (sum2 / nf - mean * mean).max(T::zero());
    (mean, (var / (nf - T::one()).max(T::one())).sqrt())
}

/// Sums `f` over `samples` draws in fixed-size chunks, chunk `c` on stream `(seed, c)`.
fn chunked_sums<T: Real, F>(samples: usize, seed: u64, f: F) -> (T, T)
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> T + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<(T, T)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, c as u64);
            let n = CHUNK.min(samples - c * CHUNK);
            let mut s = T::zero();
            let mut s2 = T::zero();
            for _ in 0..n {
                let x = f(&mut r);
                s = s + x;
                s2 = s2 + x * x;
            }
            (s, s2)
        })
        .collect();
    parts.into_iter().fold((T::zero(), T::zero()), |a, b| (a.0 + b.0, a.1 + b.1))
}

fn sphere<T: Real, R: Rng>(r: &mut R) -> Vec3<T> {
    let d: [f64; 3] = UnitSphere.sample(r);
    [T::lit(d[0]), T::lit(d[1]), T::lit(d[2])]
}

fn bin_seed(seed: u64, bin: usize) -> u64 {
    seed ^ (bin as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const MIN_SAMPLES: usize = 10_000;

/// Sphere-sampling estimate of the four-wave collision integral at every bin.
///
/// `eta` defaults to the bin's frequency width `Δ(ln k)·ω(k)`.
pub fn fourwave_collide<T: Real>(
    spectrum: &TurbulenceSpectrum<T>,
    model: &DispersionModel<T>,
    lambda: T,
    samples: usize,
    eta: Option<T>,
    seed: u64,
) -> Result<FourWaveEstimate<T>> {
    check_continuum(model)?;
    if samples < MIN_SAMPLES {
        return invalid(format!("{samples} samples per bin is below the minimum {MIN_SAMPLES}"));
    }
    let s = spectrum;
    let (lo, hi) = (s.k_min.ln(), s.k_max.ln());
    let span = hi - lo;
    let four_pi = T::lit(2.0) * T::two_pi();
    let base = fourwave_prefactor(lambda) * span * span * four_pi * four_pi;
    let mut etas = Vec::with_capacity(s.bins());
    let mut stats = Vec::with_capacity(s.bins());
    for (i, &k) in s.k.iter().enumerate() {
        let om = radial_omega(model, k);
        let e = eta.unwrap_or(s.du() * om);
        if !(e > T::zero()) {
            return invalid("mollifier width must be positive");
        }
        etas.push(e);
        let wk = s.w[i];
        let kv = [k, T::zero(), T::zero()];
        let (sum, sum2) = chunked_sums(samples, bin_seed(seed, i), |r| {
            let k1 = (lo + span * T::lit(r.random::<f64>())).exp();
            let k2 = (lo + span * T::lit(r.random::<f64>())).exp();
            let d1: Vec3<T> = sphere(r);
            let d2: Vec3<T> = sphere(r);
            let k3v = [kv[0] + k1 * d1[0] - k2 * d2[0], k1 * d1[1] - k2 * d2[1], k1 * d1[2] - k2 * d2[2]];
            let k3 = norm(&k3v);
            let Some(w3) = s.interpolate(k3) else { return T::zero() };
            let w1 = s.interpolate(k1).unwrap_or(T::zero());
            let w2 = s.interpolate(k2).unwrap_or(T::zero());
            let (o1, o2, o3) = (radial_omega(model, k1), radial_omega(model, k2), radial_omega(model, k3));
            let delta = mollified_delta(om + o1 - o2 - o3, e);
            base * k1.powi(3) * k2.powi(3) * delta / (om * o1 * o2 * o3) * quartic_bracket(wk, w1, w2, w3)
        });
        stats.push(mean_stderr(sum, sum2, samples));
    }
    Ok(FourWaveEstimate::assemble(
        s,
        model,
        stats,
        samples,
        etas,
        "log-uniform |k1|,|k2| with weight (ln R)^2 (4 pi)^2 |k1|^3 |k2|^3, uniform directions",
    ))
}

/// One sample of the angle-reduced integrand: the resonant `k₃` and the
/// kinematic weight multiplying the bracket, or `None` off the band.
#[derive(Clone, Copy, Debug)]
struct ReducedSample<T> {
    k1: T,
    k2: T,
    k3: T,
    weight: T,
}

fn reduced_sample<T: Real>(model: &DispersionModel<T>, k: T, k1: T, k2: T, band: (T, T), base: T) -> Option<ReducedSample<T>> {
    let w0 = model.omega0();
    let (om, o1, o2) = (radial_omega(model, k), radial_omega(model, k1), radial_omega(model, k2));
    let o3 = om + o1 - o2;
    if !(o3 > w0) {
        return None;
    }
    let k3 = match model {
        DispersionModel::ContinuumLinear => o3,
        _ => ((o3 - w0) * (o3 + w0)).sqrt(),
    };
    if k3 < band.0 || k3 > band.1 {
        return None;
    }
    let j = angular_kernel(k, k1, k2, k3);
    // (k₁k₂k₃/k) J (ωω₁ω₂ω₃)⁻¹ (dω/dk₃)⁻¹, times the sampling Jacobian k₁k₂.
    let weight = base * (k1 * k2 * k3 / k) * j / (om * o1 * o2 * o3) * (o3 / k3) * k1 * k2;
    Some(ReducedSample { k1, k2, k3, weight })
}

fn reduced_base<T: Real>(lambda: T, span: T) -> T {
    let four_pi = T::lit(2.0) * T::two_pi();
    fourwave_prefactor(lambda) * four_pi.powi(4) / T::two_pi().powi(3) * span * span
}

/// Angle-reduced estimate of the collision integral at every bin (exact
/// frequency delta, `|k₁|, |k₂|` log-uniform).
pub fn fourwave_reduced<T: Real>(
    spectrum: &TurbulenceSpectrum<T>,
    model: &DispersionModel<T>,
    lambda: T,
    samples: usize,
    seed: u64,
) -> Result<FourWaveEstimate<T>> {
    check_continuum(model)?;
    if samples < MIN_SAMPLES {
        return invalid(format!("{samples} samples per bin is below the minimum {MIN_SAMPLES}"));
    }
    let s = spectrum;
    let (lo, hi) = (s.k_min.ln(), s.k_max.ln());
    let span = hi - lo;
    let base = reduced_base(lambda, span);
    let stats = s
        .k
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let wk = s.w[i];
            let (sum, sum2) = chunked_sums(samples, bin_seed(seed, i), |r| {
                let k1 = (lo + span * T::lit(r.random::<f64>())).exp();
                let k2 = (lo + span * T::lit(r.random::<f64>())).exp();
                match reduced_sample(model, k, k1, k2, (s.k_min, s.k_max), base) {
                    Some(q) => {
                        let w = |x| s.interpolate(x).unwrap_or(T::zero());
                        q.weight * quartic_bracket(wk, w(q.k1), w(q.k2), w(q.k3))
                    }
                    None => T::zero(),
                }
            });
            mean_stderr(sum, sum2, samples)
        })
        .collect();
    Ok(FourWaveEstimate::assemble(
        s,
        model,
        stats,
        samples,
        vec![T::zero(); spectrum.bins()],
        "log-uniform |k1|,|k2| with weight (ln R)^2 |k1| |k2|, solid angles integrated exactly",
    ))
}

/// Zero crossing of `I(σ)` between two scan points.
#[derive(Clone, Debug, PartialEq)]
pub struct Crossing<T> {
    pub lo: T,
    pub hi: T,
    /// Linear interpolation of the root.
    pub sigma: T,
    /// One standard error of the root from the bracketing MC errors.
    pub uncertainty: T,
}

#[derive(Clone, Debug)]
pub struct KzScan<T> {
    pub k: T,
    pub band_ratio: T,
    pub samples: usize,
    pub sigma: Vec<T>,
    pub value: Vec<T>,
    pub stderr: Vec<T>,
    /// Relative error above 30 %; excluded from crossing detection.
    pub flagged: Vec<bool>,
    pub crossings: Vec<Crossing<T>>,
    /// Largest per-sample relative bracket at σ = 0 and σ = 1.
    pub equilibrium_residual: [T; 2],
}

impl<T: Real> KzScan<T> {
    /// CSV `sigma,I,stderr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,I,stderr\n");
        for i in 0..self.sigma.len() {
            s.push_str(&format!("{},{:e},{:e}\n", self.sigma[i].as_f64(), self.value[i].as_f64(), self.stderr[i].as_f64()));
        }
        s
    }
}

fn power_bracket<T: Real>(sigma: T, k: T, k1: T, k2: T, k3: T) -> (T, T) {
    let (w, w1, w2, w3) = (k.powf(-sigma), k1.powf(-sigma), k2.powf(-sigma), k3.powf(-sigma));
    (quartic_bracket(w, w1, w2, w3), bracket_scale(w, w1, w2, w3))
}

/// Scans `I(σ)`, the collision integral at the geometric band center for
/// `W = |k|^{−σ}`, with common random numbers across σ.
pub fn kz_exponent_scan<T: Real>(
    model: &DispersionModel<T>,
    sigmas: &[T],
    band: (T, T),
    samples: usize,
    seed: u64,
) -> Result<KzScan<T>> {
    check_continuum(model)?;
    let (k_min, k_max) = band;
    if !(k_min > T::zero()) || !(k_max / k_min >= T::lit(100.0)) || !k_max.is_finite() {
        return invalid(format!("band ratio must be at least 1e2, got [{k_min}, {k_max}]"));
    }
    if sigmas.is_empty() || sigmas.iter().any(|&s| !(s > T::lit(0.5) && s < T::lit(2.5))) {
        return invalid("sigma values must lie in (0.5, 2.5)");
    }
    if sigmas.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("sigma values must be increasing");
    }
    if samples < MIN_SAMPLES {
        return invalid(format!("{samples} samples is below the minimum {MIN_SAMPLES}"));
    }
    let (lo, hi) = (k_min.ln(), k_max.ln());
    let span = hi - lo;
    let base = reduced_base(T::one(), span);
    let k = (k_min * k_max).sqrt();
    let ns = sigmas.len();
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<(Vec<T>, Vec<T>, [T; 2])> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, c as u64);
            let n = CHUNK.min(samples - c * CHUNK);
            let mut s = vec![T::zero(); ns];
            let mut s2 = vec![T::zero(); ns];
            let mut eq = [T::zero(); 2];
            for _ in 0..n {
                let k1 = (lo + span * T::lit(r.random::<f64>())).exp();
                let k2 = (lo + span * T::lit(r.random::<f64>())).exp();
                let Some(q) = reduced_sample(model, k, k1, k2, band, base) else { continue };
                for (j, &sg) in sigmas.iter().enumerate() {
                    let x = q.weight * power_bracket(sg, k, q.k1, q.k2, q.k3).0;
                    s[j] = s[j] + x;
                    s2[j] = s2[j] + x * x;
                }
                for (e, sg) in eq.iter_mut().zip([T::zero(), T::one()]) {
                    let (b, sc) = power_bracket(sg, k, q.k1, q.k2, q.k3);
                    *e = e.max(b.abs() / sc);
                }
            }
            (s, s2, eq)
        })
        .collect();
    let mut sum = vec![T::zero(); ns];
    let mut sum2 = vec![T::zero(); ns];
    let mut eq = [T::zero(); 2];
    for (s, s2, e) in parts {
        for j in 0..ns {
            sum[j] = sum[j] + s[j];
            sum2[j] = sum2[j] + s2[j];
        }
        eq[0] = eq[0].max(e[0]);
        eq[1] = eq[1].max(e[1]);
    }
    let (value, stderr): (Vec<T>, Vec<T>) = (0..ns).map(|j| mean_stderr(sum[j], sum2[j], samples)).unzip();
    let flagged: Vec<bool> = (0..ns).map(|j| !(stderr[j] <= T::lit(0.3) * value[j].abs())).collect();
    let crossings = detect_crossings(sigmas, &value, &stderr, &flagged);
    Ok(KzScan {
        k,
        band_ratio: k_max / k_min,
        samples,
        sigma: sigmas.to_vec(),
        value,
        stderr,
        flagged,
        crossings,
        equilibrium_residual: eq,
    })
}

/// Sign changes between consecutive unflagged points that are both at least
/// two standard errors away from zero. Values below `1e-9` of the largest
/// magnitude are rounding noise of an exact zero (the bracket identity at
/// σ = 1) and carry no sign.
pub fn detect_crossings<T: Real>(sigma: &[T], value: &[T], stderr: &[T], flagged: &[bool]) -> Vec<Crossing<T>> {
    let two = T::lit(2.0);
    let floor = T::lit(1e-9) * value.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let usable: Vec<usize> = (0..sigma.len())
        .filter(|&i| !flagged[i] && value[i].abs() >= two * stderr[i] && value[i].abs() > floor)
        .collect();
    let mut out = Vec::new();
    for w in usable.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (value[a] > T::zero()) == (value[b] > T::zero()) {
            continue;
        }
        let (ia, ib) = (value[a], value[b]);
        let h = sigma[b] - sigma[a];
        let d = ia - ib;
        let root = sigma[a] + h * ia / d;
        // ∂root/∂Ia = −h Ib/d², ∂root/∂Ib = h Ia/d².
        let u = (h / (d * d)) * ((ib * stderr[a]).powi(2) + (ia * stderr[b]).powi(2)).sqrt();
        out.push(Crossing { lo: sigma[a], hi: sigma[b], sigma: root, uncertainty: u });
    }
    out
}

/// Resonant quadruple for `ω = |k|`: given `k, k₁` and the direction of `k₂`,
/// `|k₂|` solves `|k| + |k₁| = |k₂| + |k + k₁ − k₂|`.
pub fn resonant_quadruple<T: Real>(k: Vec3<T>, k1: Vec3<T>, dir2: Vec3<T>) -> Option<[Vec3<T>; 4]> {
    let p = [k[0] + k1[0], k[1] + k1[1], k[2] + k1[2]];
    let s = norm(&k) + norm(&k1);
    let den = T::lit(2.0) * (s - (dir2[0] * p[0] + dir2[1] * p[1] + dir2[2] * p[2]));
    if !(den > T::zero()) {
        return None;
    }
    let r = (s * s - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2])) / den;
    let k2 = [r * dir2[0], r * dir2[1], r * dir2[2]];
    let k3 = [p[0] - k2[0], p[1] - k2[1], p[2] - k2[2]];
    Some([k, k1, k2, k3])
}

/// Largest relative quartic bracket of `W = (β|k| + α·k + γ)⁻¹` over `count`
/// random resonant quadruples with `|k|, |k₁|` in `band`.
pub fn family_bracket_residual<T: Real>(alpha: Vec3<T>, beta: T, gamma: T, band: (T, T), count: usize, seed: u64) -> Result<T> {
    if !(beta > norm(&alpha)) {
        return invalid("stationary family needs beta > |alpha|");
    }
    let wf = |k: &Vec3<T>| T::one() / (beta * norm(k) + alpha[0] * k[0] + alpha[1] * k[1] + alpha[2] * k[2] + gamma);
    let mut r = rng::stream(seed, 0);
    let (lo, span) = (band.0.ln(), (band.1 / band.0).ln());
    let mut worst = T::zero();
    let mut used = 0;
    while used < count {
        let pick = |r: &mut rand_chacha::ChaCha8Rng| {
            let m = (lo + span * T::lit(r.random::<f64>())).exp();
            let d: Vec3<T> = sphere(r);
            [m * d[0], m * d[1], m * d[2]]
        };
        let k = pick(&mut r);
        let k1 = pick(&mut r);
        let d2: Vec3<T> = sphere(&mut r);
        let Some(q) = resonant_quadruple(k, k1, d2) else { continue };
        let w: Vec<T> = q.iter().map(wf).collect();
        if w.iter().any(|x| !(*x > T::zero())) {
            continue;
        }
        let b = quartic_bracket(w[0], w[1], w[2], w[3]);
        worst = worst.max(b.abs() / bracket_scale(w[0], w[1], w[2], w[3]));
        used += 1;
    }
    Ok(worst)
}

/// Number and energy balance of one forced step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget<T> {
    pub t: T,
    /// `∫C(W)` and its standard error.
    pub collision_number: T,
    pub collision_number_stderr: T,
    /// `∫ωC(W)` and its standard error.
    pub collision_energy: T,
    pub collision_energy_stderr: T,
    /// `∫ΓW` and `∫ωΓW`.
    pub forcing_number: T,
    pub forcing_energy: T,
}

#[derive(Clone, Debug)]
pub struct ForcedRun<T> {
    pub budgets: Vec<Budget<T>>,
    pub snapshots: Vec<(T, Vec<T>)>,
    pub spectrum: TurbulenceSpectrum<T>,
    /// Collision integral and its standard error at the final state.
    pub collision: Vec<T>,
    pub collision_stderr: Vec<T>,
    /// Relative rate of change `‖∂W/∂t‖/‖W‖` at the final state.
    pub final_rate: T,
    pub halvings: usize,
}

impl<T: Real> ForcedRun<T> {
    /// `∫Γ`, which must be negative in a steady state.
    pub fn forcing_integral(&self) -> T {
        let v = self.spectrum.shell_volumes();
        v.iter().zip(&self.spectrum.gamma).fold(T::zero(), |s, (a, b)| s + *a * *b)
    }

    /// CSV `t,collision_number,collision_number_stderr,collision_energy,collision_energy_stderr,forcing_number,forcing_energy`.
    pub fn budgets_csv(&self) -> String {
        let mut s = String::from(
            "t,collision_number,collision_number_stderr,collision_energy,collision_energy_stderr,forcing_number,forcing_energy\n",
        );
        for b in &self.budgets {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                b.t.as_f64(),
                b.collision_number.as_f64(),
                b.collision_number_stderr.as_f64(),
                b.collision_energy.as_f64(),
                b.collision_energy_stderr.as_f64(),
                b.forcing_number.as_f64(),
                b.forcing_energy.as_f64()
            ));
        }
        s
    }
}

type Node<T> = Option<(T, [Interp<T>; 3])>;

/// Frozen quadrature nodes of the reduced estimator for one bin: two
/// jittered samples in each cell of an `n × n` stratification of
/// `(ln k₁, ln k₂)`. Stratification takes the quadrature error from
/// `O(N^{-1/2})` to `O(N^{-1})` for the piecewise smooth integrand; the pair
/// difference in each cell gives the standard error.
struct BinNodes<T> {
    pairs: Vec<[Node<T>; 2]>,
}

struct FrozenOperator<T> {
    bins: Vec<BinNodes<T>>,
    cells: usize,
}

impl<T: Real> FrozenOperator<T> {
    fn new(s: &TurbulenceSpectrum<T>, model: &DispersionModel<T>, lambda: T, samples: usize, seed: u64) -> Self {
        let (lo, span) = (s.k_min.ln(), (s.k_max / s.k_min).ln());
        let base = reduced_base(lambda, span);
        let n = ((samples as f64 / 2.0).sqrt().ceil() as usize).max(1);
        let cell = span / T::count(n);
        let bins = s
            .k
            .par_iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut r = rng::stream(bin_seed(seed, i), 0);
                let mut draw = |c1: usize, c2: usize| -> Node<T> {
                    let k1 = (lo + cell * (T::count(c1) + T::lit(r.random::<f64>()))).exp();
                    let k2 = (lo + cell * (T::count(c2) + T::lit(r.random::<f64>()))).exp();
                    let q = reduced_sample(model, k, k1, k2, (s.k_min, s.k_max), base)?;
                    let at = |x| Interp::locate(s, x).expect("inside band");
                    Some((q.weight, [at(q.k1), at(q.k2), at(q.k3)]))
                };
                let mut pairs = Vec::with_capacity(n * n);
                for c1 in 0..n {
                    for c2 in 0..n {
                        let a = draw(c1, c2);
                        let b = draw(c1, c2);
                        if a.is_some() || b.is_some() {
                            pairs.push([a, b]);
                        }
                    }
                }
                BinNodes { pairs }
            })
            .collect();
        Self { bins, cells: n * n }
    }

    fn apply(&self, w: &[T]) -> (Vec<T>, Vec<T>) {
        let lw: Vec<T> = w.iter().map(|x| x.ln()).collect();
        let cells = T::count(self.cells);
        self.bins
            .par_iter()
            .enumerate()
            .map(|(i, b)| {
                let eval = |node: &Node<T>| match node {
                    Some((wt, ip)) => {
                        let at = |p: &Interp<T>| p.eval_with_logs(w, &lw);
                        *wt * quartic_bracket(w[i], at(&ip[0]), at(&ip[1]), at(&ip[2]))
                    }
                    None => T::zero(),
                };
                let mut s = T::zero();
                let mut v = T::zero();
                for [x, y] in &b.pairs {
                    let (x, y) = (eval(x), eval(y));
                    s = s + x + y;
                    v = v + (x - y) * (x - y);
                }
                (s / (T::lit(2.0) * cells), (v / T::lit(4.0)).sqrt() / cells)
            })
            .unzip()
    }
}

/// Options of [`evolve_forced`].
#[derive(Clone, Copy, Debug)]
pub struct ForcedOptions<T> {
    pub lambda: T,
    pub samples: usize,
    pub seed: u64,
    /// Budgets are recorded every `log_every` steps.
    pub log_every: usize,
    pub snapshot_every: usize,
    pub max_halvings: usize,
}

impl<T: Real> Default for ForcedOptions<T> {
    fn default() -> Self {
        Self { lambda: T::one(), samples: 20_000, seed: 0, log_every: 10, snapshot_every: 100, max_halvings: 20 }
    }
}

/// Integrates `∂W/∂t = C(W) + ΓW` with RK4. The reduced estimator's sample
/// nodes (stratified, two per cell) are drawn once per bin and reused every step.
pub fn evolve_forced<T: Real>(
    spectrum: &TurbulenceSpectrum<T>,
    model: &DispersionModel<T>,
    t_end: T,
    dt: T,
    opts: &ForcedOptions<T>,
) -> Result<ForcedRun<T>> {
    check_continuum(model)?;
    if opts.samples < MIN_SAMPLES {
        return invalid(format!("{} samples per bin is below the minimum {MIN_SAMPLES}", opts.samples));
    }
    if !(dt > T::zero()) || !(t_end >= T::zero()) {
        return invalid("need dt > 0 and t_end >= 0");
    }
    let s = spectrum.clone();
    let op = FrozenOperator::new(&s, model, opts.lambda, opts.samples, opts.seed);
    let vol = s.shell_volumes();
    let om: Vec<T> = s.k.iter().map(|&k| radial_omega(model, k)).collect();
    let rhs = |w: &[T]| -> Vec<T> {
        let (c, _) = op.apply(w);
        c.iter().zip(w).zip(&s.gamma).map(|((c, w), g)| *c + *g * *w).collect()
    };
    let budget = |t: T, w: &[T]| -> (Budget<T>, Vec<T>, Vec<T>) {
        let (c, e) = op.apply(w);
        let mut b = Budget {
            t,
            collision_number: T::zero(),
            collision_number_stderr: T::zero(),
            collision_energy: T::zero(),
            collision_energy_stderr: T::zero(),
            forcing_number: T::zero(),
            forcing_energy: T::zero(),
        };
        for i in 0..w.len() {
            b.collision_number = b.collision_number + vol[i] * c[i];
            b.collision_number_stderr = b.collision_number_stderr + (vol[i] * e[i]).powi(2);
            b.collision_energy = b.collision_energy + om[i] * vol[i] * c[i];
            b.collision_energy_stderr = b.collision_energy_stderr + (om[i] * vol[i] * e[i]).powi(2);
            b.forcing_number = b.forcing_number + vol[i] * s.gamma[i] * w[i];
            b.forcing_energy = b.forcing_energy + om[i] * vol[i] * s.gamma[i] * w[i];
        }
        b.collision_number_stderr = b.collision_number_stderr.sqrt();
        b.collision_energy_stderr = b.collision_energy_stderr.sqrt();
        (b, c, e)
    };
    let w_ref = s.w.iter().fold(T::zero(), |m, &x| m.max(x)).max(T::min_positive_value());
    let mut w = s.w.clone();
    let mut t = T::zero();
    let mut h = dt;
    let mut halvings = 0;
    let mut step = 0usize;
    let mut budgets = vec![budget(t, &w).0];
    let mut snapshots = vec![(t, w.clone())];
    let axpy = |a: &[T], c: T, d: &[T]| -> Vec<T> { a.iter().zip(d).map(|(x, y)| *x + c * *y).collect() };
    let eps = t_end * T::lit(1e-12);
    while t < t_end - eps {
        let hs = h.min(t_end - t);
        let k1 = rhs(&w);
        let k2 = rhs(&axpy(&w, hs / T::lit(2.0), &k1));
        let k3 = rhs(&axpy(&w, hs / T::lit(2.0), &k2));
        let k4 = rhs(&axpy(&w, hs, &k3));
        let next: Vec<T> = (0..w.len())
            .map(|i| w[i] + hs / T::lit(6.0) * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]))
            .collect();
        if next.iter().any(|x| !(*x >= T::zero())) {
            if next.iter().any(|x| !x.is_finite()) || halvings >= opts.max_halvings {
                return Err(Error::Positivity(format!("spectrum went negative at t = {t} after {halvings} halvings")));
            }
            h = h / T::lit(2.0);
            halvings += 1;
            continue;
        }
        let peak = next.iter().fold(T::zero(), |m, &x| m.max(x));
        if peak > T::lit(1e6) * w_ref {
            return Err(Error::BlowUp(format!(
                "max W grew from {w_ref} to {peak} at t = {}",
                t + hs
            )));
        }
        w = next;
        t = t + hs;
        step += 1;
        if step % opts.log_every.max(1) == 0 {
            budgets.push(budget(t, &w).0);
        }
        if opts.snapshot_every > 0 && step % opts.snapshot_every == 0 {
            snapshots.push((t, w.clone()));
        }
    }
    let (last, c, e) = budget(t, &w);
    if budgets.last().map_or(true, |b| b.t != t) {
        budgets.push(last);
    }
    if snapshots.last().map_or(true, |s| s.0 != t) {
        snapshots.push((t, w.clone()));
    }
    let d = rhs(&w);
    let num = d.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt();
    let den = w.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt().max(T::min_positive_value());
    let spectrum = TurbulenceSpectrum { w, ..s };
    Ok(ForcedRun { budgets, snapshots, spectrum, collision: c, collision_stderr: e, final_rate: num / den, halvings })
}

/// Least-squares slope of `ln W` against `ln k` over bins inside `[a, b]`.
pub fn log_log_slope<T: Real>(s: &TurbulenceSpectrum<T>, a: T, b: T) -> Result<T> {
    let pts: Vec<(T, T)> = s
        .k
        .iter()
        .zip(&s.w)
        .filter(|(k, w)| **k >= a && **k <= b && **w > T::zero())
        .map(|(k, w)| (k.ln(), w.ln()))
        .collect();
    if pts.len() < 2 {
        return invalid("fewer than two positive bins in the fit window");
    }
    let n = T::count(pts.len());
    let mx = pts.iter().map(|p| p.0).sum::<T>() / n;
    let my = pts.iter().map(|p| p.1).sum::<T>() / n;
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<T>();
    let sxx = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<T>();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angular_kernel_on_shell_is_quarter_pi_min() {
        for (a, b, c) in [(1.0, 2.0, 2.5), (3.0, 1.0, 2.0), (0.7, 1.3, 0.4)] {
            let d: f64 = a + b - c;
            let j = angular_kernel(a, b, c, d);
            let m = a.min(b).min(c).min(d);
            assert!((j - std::f64::consts::FRAC_PI_4 * m).abs() < 1e-12, "{j} {m}");
        }
        // No triangle closes when one side exceeds the sum of the others.
        assert!(angular_kernel(10.0f64, 1.0, 1.0, 1.0).abs() < 1e-12);
    }

    #[test]
    fn bracket_identities() {
        assert_eq!(quartic_bracket(2.0, 2.0, 2.0, 2.0), 0.0);
        let w = |k: f64| 1.0 / k;
        let (k, k1, k2) = (1.0f64, 3.0, 2.5);
        let k3 = k + k1 - k2;
        assert!(quartic_bracket(w(k), w(k1), w(k2), w(k3)).abs() < 1e-15);
    }

    #[test]
    fn family_members_are_stationary_on_shell() {
        let r = family_bracket_residual([0.3, -0.2, 0.1], 1.0, 0.5, (0.1, 10.0), 2000, 3).unwrap();
        assert!(r < 1e-10, "{r}");
        assert!(family_bracket_residual([2.0, 0.0, 0.0], 1.0, 0.5, (0.1, 10.0), 10, 3).is_err());
    }

    #[test]
    fn refuses_small_budgets_and_lattices() {
        let s = TurbulenceSpectrum::<f64>::power_law(1.0, 10.0, 8, 1.0).unwrap();
        let m = DispersionModel::ContinuumLinear;
        assert!(fourwave_collide(&s, &m, 1.0, 9_999, None, 0).is_err());
        assert!(fourwave_reduced(&s, &DispersionModel::NearestNeighbor { omega0: 1.0 }, 1.0, 20_000, 0).is_err());
        assert!(kz_exponent_scan(&m, &[1.2], (1.0, 50.0), 20_000, 0).is_err());
        assert!(kz_exponent_scan(&m, &[0.4], (1.0, 100.0), 20_000, 0).is_err());
    }

    #[test]
    fn rayleigh_jeans_spectrum_is_stationary() {
        let m = DispersionModel::ContinuumLinear;
        let s = TurbulenceSpectrum::<f64>::power_law(1.0, 20.0, 12, 1.0).unwrap();
        let e = fourwave_reduced(&s, &m, 1.0, 20_000, 5).unwrap();
        let scale = fourwave_reduced(&TurbulenceSpectrum::power_law(1.0, 20.0, 12, 1.5).unwrap(), &m, 1.0, 20_000, 5)
            .unwrap()
            .value
            .iter()
            .fold(0.0f64, |a, x| a.max(x.abs()));
        // Interpolation between bins is exact for a power law, so the only
        // error left is rounding.
        assert!(e.value.iter().all(|v| v.abs() < 1e-10 * scale), "{:?}", e.value);
    }

    #[test]
    fn conservation_within_three_standard_errors() {
        let m = DispersionModel::ContinuumLinear;
        // The outer k is a midpoint rule in ln k; 10 bins leave an O(8%) bias.
        let n = 40;
        let k = log_grid(1.0, 10.0, n).unwrap();
        let w = k.iter().map(|&x: &f64| (-(x - 4.0).powi(2) / 8.0).exp() + 0.1).collect();
        let s = TurbulenceSpectrum::new(1.0, 10.0, w, vec![0.0; n]).unwrap();
        for e in [fourwave_reduced(&s, &m, 1.0, 20_000, 9).unwrap(), fourwave_collide(&s, &m, 1.0, 20_000, None, 9).unwrap()] {
            assert!(e.number_sum.abs() <= 3.0 * e.number_stderr, "{} {}", e.number_sum, e.number_stderr);
            assert!(e.energy_sum.abs() <= 3.0 * e.energy_stderr, "{} {}", e.energy_sum, e.energy_stderr);
        }
    }

    #[test]
    fn scan_is_seed_deterministic() {
        let m = DispersionModel::ContinuumLinear;
        let sg = [1.2, 1.5, 1.8];
        let a = kz_exponent_scan(&m, &sg, (1.0, 100.0), 20_000, 4).unwrap();
        let b = kz_exponent_scan(&m, &sg, (1.0, 100.0), 20_000, 4).unwrap();
        assert_eq!(a.value, b.value);
        assert!(a.equilibrium_residual[0] == 0.0 && a.equilibrium_residual[1] < 1e-10);
    }

    #[test]
    fn crossing_detection_rules() {
        let s = [1.0f64, 1.1, 1.2, 1.3];
        let v = [1.0, 0.1, -1.0, -2.0];
        let e = [0.1, 0.1, 0.1, 0.1];
        let c = detect_crossings(&s, &v, &e, &[false; 4]);
        // The middle point is within 2σ of zero and is skipped.
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].lo, c[0].hi), (1.0, 1.2));
        assert!((c[0].sigma - 1.1).abs() < 1e-12);
    }

    #[test]
    fn forced_run_without_forcing_keeps_equilibrium() {
        let m = DispersionModel::ContinuumLinear;
        let s = TurbulenceSpectrum::<f64>::power_law(1.0, 10.0, 8, 1.0).unwrap();
        let opts = ForcedOptions { samples: 10_000, ..Default::default() };
        let run = evolve_forced(&s, &m, 0.5, 0.05, &opts).unwrap();
        for (a, b) in run.spectrum.w.iter().zip(&s.w) {
            assert!((a - b).abs() < 1e-10 * b);
        }
    }
}
