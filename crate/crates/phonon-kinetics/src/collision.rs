//! Three-phonon and isotope collision operators and the kinetic functionals.
//!
//! Sums over `dk₁` are grid averages `(1/N³) Σ`, with the energy delta
//! replaced by the mollifier `δ_η`. The raw operators follow the merging (I)
//! and splitting (II) terms with their 2:1 rate ratio. The conservative
//! operator distributes each reaction along an energy-projected
//! stoichiometry, which keeps energy, the H-theorem and the equilibrium
//! family exact at finite `η`.

use crate::error::{invalid, Error, Result};
use crate::modes::{ModeSet, Occupation, Statistics};
use crate::scalar::{mollified_delta, Real};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// Rate factor of a stored triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefactorKind {
    /// `(ω ω₁ ω₂)⁻¹`.
    OnSite,
    /// `∏ⱼ |Σ_α ωⱼ^{-½}(e^{i2πkⱼ^α} − 1)|²` for the potential in displacement differences.
    DifferenceCoupling,
}

/// Which form of the three-phonon operator to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Energy-projected stoichiometry; exact conservation at finite η.
    #[default]
    Conservative,
    /// Terms (I) and (II) as written; conservation only as η → 0.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionParams<T> {
    /// `γ = πλ²/2`.
    pub gamma: T,
    pub lambda: T,
    /// Quartic stabilizer `λ′ = λ²/18ω₀²` (infinite when ω₀ = 0).
    pub lambda4: T,
}

impl<T: Real> CollisionParams<T> {
    pub fn from_lambda(lambda: T, omega0: T) -> Self {
        let l2 = lambda * lambda;
        let lambda4 = if omega0 > T::zero() {
            l2 / (T::lit(18.0) * omega0 * omega0)
        } else if l2 == T::zero() {
            T::zero()
        } else {
            T::infinity()
        };
        Self { gamma: T::PI() * l2 / T::lit(2.0), lambda, lambda4 }
    }

    pub fn from_gamma(gamma: T, omega0: T) -> Result<Self> {
        if !(gamma >= T::zero()) {
            return invalid(format!("gamma must be nonnegative, got {gamma}"));
        }
        Ok(Self::from_lambda((T::lit(2.0) * gamma / T::PI()).sqrt(), omega0))
    }
}

/// One ordered resonant triple `k_l = k_i + k_j mod 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triple<T> {
    pub i: u32,
    pub j: u32,
    pub l: u32,
    /// `δ_η(ω_i + ω_j − ω_l)` times the rate prefactor.
    pub weight: T,
    /// Bit `d` set when component `d` wrapped around (`n_d = 1`).
    pub umklapp: u8,
}

/// One unordered reaction `a + b ↔ c` with its projected stoichiometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reaction<T> {
    pub a: u32,
    pub b: u32,
    pub c: u32,
    /// Multiplicity (2 for `a ≠ b`) times the triple weight.
    pub weight: T,
    /// `(1,1,−1) − E (ω_a, ω_b, ω_c)/(ω_a² + ω_b² + ω_c²)`.
    pub nu: [T; 3],
    /// Energy defect `ω_a + ω_b − ω_c`.
    pub defect: T,
}

/// Precomputed resonant triples: the sparse backbone of every three-phonon sum.
#[derive(Clone, Debug)]
pub struct TripleList<T> {
    modes: ModeSet<T>,
    delta_width: T,
    cutoff: T,
    prefactor: PrefactorKind,
    entries: Vec<Triple<T>>,
    reactions: Vec<Reaction<T>>,
}

fn prefactor_value<T: Real>(modes: &ModeSet<T>, kind: PrefactorKind, idx: [usize; 3]) -> T {
    let w = modes.omega();
    match kind {
        PrefactorKind::OnSite => T::one() / (w[idx[0]] * w[idx[1]] * w[idx[2]]),
        PrefactorKind::DifferenceCoupling => {
            let grid = modes.grid();
            idx.iter().fold(T::one(), |acc, &m| {
                let k = grid.k::<T>(m);
                let (mut re, mut im) = (T::zero(), T::zero());
                for kd in k {
                    let ph = T::two_pi() * kd;
                    re = re + ph.cos() - T::one();
                    im = im + ph.sin();
                }
                acc * (re * re + im * im) / w[m]
            })
        }
    }
}

fn reactions_from<T: Real>(modes: &ModeSet<T>, entries: &[Triple<T>]) -> Vec<Reaction<T>> {
    let w = modes.omega();
    entries
        .iter()
        .filter(|t| t.i <= t.j)
        .map(|t| {
            let (a, b, c) = (t.i as usize, t.j as usize, t.l as usize);
            let e = w[a] + w[b] - w[c];
            let s = w[a] * w[a] + w[b] * w[b] + w[c] * w[c];
            let r = e / s;
            let mult = if a == b { T::one() } else { T::lit(2.0) };
            Reaction {
                a: t.i,
                b: t.j,
                c: t.l,
                weight: mult * t.weight,
                nu: [T::one() - r * w[a], T::one() - r * w[b], -T::one() - r * w[c]],
                defect: e,
            }
        })
        .collect()
}

/// Enumerates every active pair `(i, j)` with `|ω_i + ω_j − ω_{i+j}| ≤ cutoff·η`.
pub fn build_triples<T: Real>(
    modes: &ModeSet<T>,
    delta_width: T,
    cutoff: T,
    prefactor: PrefactorKind,
) -> Result<TripleList<T>> {
    if !(delta_width > T::zero()) || !delta_width.is_finite() {
        return invalid(format!("delta_width must be positive, got {delta_width}"));
    }
    if !(cutoff >= T::lit(3.0)) || !cutoff.is_finite() {
        return invalid(format!("cutoff must be at least 3, got {cutoff}"));
    }
    let entries = enumerate(modes, cutoff * delta_width, prefactor, modes.omega(), |e| mollified_delta(e, delta_width));
    let reactions = reactions_from(modes, &entries);
    Ok(TripleList { modes: modes.clone(), delta_width, cutoff, prefactor, entries, reactions })
}

/// Fejér kernel `(1 − cos Eτ)/(πτE²)`: the resonance function of a finite
/// window `τ`, with unit mass and width `~1/τ`.
pub fn fejer_kernel<T: Real>(e: T, window: T) -> T {
    let x = e * window;
    if x.abs() < T::lit(1e-4) {
        window / T::two_pi() * (T::one() - x * x / T::lit(12.0))
    } else {
        (T::one() - x.cos()) / (T::PI() * window * e * e)
    }
}

/// Triples weighted by the Fejér kernel of a window `τ` instead of the
/// Gaussian; pairs are kept when `|E| ≤ cutoff/τ`. `detuning` replaces the
/// frequencies used in `E` (e.g. the shadow frequencies of an integrator).
/// The stored delta width is `1/τ`.
pub fn build_triples_windowed<T: Real>(
    modes: &ModeSet<T>,
    window: T,
    cutoff: T,
    prefactor: PrefactorKind,
    detuning: Option<&[T]>,
) -> Result<TripleList<T>> {
    if !(window > T::zero()) || !window.is_finite() {
        return invalid(format!("window must be positive, got {window}"));
    }
    if !(cutoff >= T::lit(3.0)) || !cutoff.is_finite() {
        return invalid(format!("cutoff must be at least 3, got {cutoff}"));
    }
    let freqs = detuning.unwrap_or(modes.omega());
    if freqs.len() != modes.len() {
        return Err(Error::Mismatch("detuning frequencies length".into()));
    }
    let entries = enumerate(modes, cutoff / window, prefactor, freqs, |e| fejer_kernel(e, window));
    let reactions = reactions_from(modes, &entries);
    Ok(TripleList { modes: modes.clone(), delta_width: T::one() / window, cutoff, prefactor, entries, reactions })
}

fn enumerate<T: Real, F: Fn(T) -> T + Sync>(
    modes: &ModeSet<T>,
    half_width: T,
    prefactor: PrefactorKind,
    freqs: &[T],
    profile: F,
) -> Vec<Triple<T>> {
    let grid = modes.grid();
    let rows: Vec<Vec<Triple<T>>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            if !modes.is_active(i) {
                return row;
            }
            for j in 0..grid.len() {
                if !modes.is_active(j) {
                    continue;
                }
                let l = grid.add(i, j);
                if !modes.is_active(l) {
                    continue;
                }
                let e = freqs[i] + freqs[j] - freqs[l];
                if e.abs() > half_width {
                    continue;
                }
                let weight = profile(e) * prefactor_value(modes, prefactor, [i, j, l]);
                row.push(Triple {
                    i: i as u32,
                    j: j as u32,
                    l: l as u32,
                    weight,
                    umklapp: grid.umklapp(i, j),
                });
            }
            row
        })
        .collect();
    rows.into_iter().flatten().collect()
}

const CACHE_MAGIC: &[u8; 4] = b"PHTR";
const CACHE_VERSION: u32 = 1;

/// SHA-256 of the JSON form of the dispersion model.
pub fn model_hash<T: Real + Serialize>(model: &crate::lattice::DispersionModel<T>) -> [u8; 32] {
    let json = serde_json::to_vec(model).expect("dispersion model serializes");
    let digest = Sha256::digest(&json);
    let mut out = [0u8; 32];
    out.copy_from_slice(digest.as_slice());
    out
}

impl<T: Real> TripleList<T> {
    pub fn modes(&self) -> &ModeSet<T> {
        &self.modes
    }

    pub fn delta_width(&self) -> T {
        self.delta_width
    }

    pub fn cutoff(&self) -> T {
        self.cutoff
    }

    pub fn prefactor(&self) -> PrefactorKind {
        self.prefactor
    }

    /// Ordered entries, sorted by `(i, j)`.
    pub fn entries(&self) -> &[Triple<T>] {
        &self.entries
    }

    pub fn reactions(&self) -> &[Reaction<T>] {
        &self.reactions
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fraction of ordered entries that are umklapp processes.
    pub fn umklapp_fraction(&self) -> T {
        if self.entries.is_empty() {
            return T::zero();
        }
        let u = self.entries.iter().filter(|t| t.umklapp != 0).count();
        T::count(u) / T::count(self.entries.len())
    }

    /// Looks up the ordered entry `(i, j)`.
    pub fn find(&self, i: usize, j: usize) -> Option<&Triple<T>> {
        self.entries
            .binary_search_by(|t| (t.i as usize, t.j as usize).cmp(&(i, j)))
            .ok()
            .map(|p| &self.entries[p])
    }

    /// Active points that appear in at least one triple.
    pub fn constrained_points(&self) -> Vec<usize> {
        let mut seen = vec![false; self.modes.len()];
        for r in &self.reactions {
            seen[r.a as usize] = true;
            seen[r.b as usize] = true;
            seen[r.c as usize] = true;
        }
        (0..seen.len()).filter(|&i| seen[i]).collect()
    }

    fn check(&self, w: &Occupation<T>) -> Result<()> {
        if w.grid() != self.modes.grid() {
            return Err(Error::Mismatch(format!(
                "occupation grid N={} but triples built on N={}",
                w.grid().n(),
                self.modes.grid().n()
            )));
        }
        Ok(())
    }

    /// Writes the binary cache: header `PHTR`, version, N, model hash, η,
    /// cutoff, prefactor, count, then `(i, j, l, weight, umklapp)` records.
    pub fn save(&self, path: &Path) -> Result<()>
    where
        T: Serialize,
    {
        let mut buf = Vec::with_capacity(64 + self.entries.len() * 21);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.modes.grid().n() as u32).to_le_bytes());
        buf.extend_from_slice(&model_hash(self.modes.model()));
        buf.extend_from_slice(&self.delta_width.as_f64().to_le_bytes());
        buf.extend_from_slice(&self.cutoff.as_f64().to_le_bytes());
        buf.push(match self.prefactor {
            PrefactorKind::OnSite => 0,
            PrefactorKind::DifferenceCoupling => 1,
        });
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for t in &self.entries {
            buf.extend_from_slice(&t.i.to_le_bytes());
            buf.extend_from_slice(&t.j.to_le_bytes());
            buf.extend_from_slice(&t.l.to_le_bytes());
            buf.extend_from_slice(&t.weight.as_f64().to_le_bytes());
            buf.push(t.umklapp);
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Reads a cache file and checks it against `modes` and the requested η, cutoff.
    pub fn load(
        path: &Path,
        modes: &ModeSet<T>,
        delta_width: T,
        cutoff: T,
        prefactor: PrefactorKind,
    ) -> Result<Self>
    where
        T: Serialize,
    {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| Error::Cache("truncated file".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(Error::Cache("bad magic".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().expect("8 bytes"));
        let version = u32_at(take(4)?);
        if version != CACHE_VERSION {
            return Err(Error::Cache(format!("unsupported version {version}")));
        }
        let n = u32_at(take(4)?) as usize;
        if n != modes.grid().n() {
            return Err(Error::Cache(format!("cache built for N={n}")));
        }
        if take(32)? != model_hash(modes.model()) {
            return Err(Error::Cache("dispersion model differs".into()));
        }
        let eta = f64_at(take(8)?);
        let cut = f64_at(take(8)?);
        let tol = 1e-12 * eta.abs().max(1.0);
        if (eta - delta_width.as_f64()).abs() > tol || (cut - cutoff.as_f64()).abs() > 1e-12 {
            return Err(Error::Cache("delta width or cutoff differs".into()));
        }
        let kind = match take(1)?[0] {
            0 => PrefactorKind::OnSite,
            1 => PrefactorKind::DifferenceCoupling,
            k => return Err(Error::Cache(format!("unknown prefactor tag {k}"))),
        };
        if kind != prefactor {
            return Err(Error::Cache("prefactor kind differs".into()));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut entries = Vec::with_capacity(count);
        let m = modes.len() as u32;
        for _ in 0..count {
            let i = u32_at(take(4)?);
            let j = u32_at(take(4)?);
            let l = u32_at(take(4)?);
            let weight = T::lit(f64_at(take(8)?));
            let umklapp = take(1)?[0];
            if i >= m || j >= m || l >= m {
                return Err(Error::Cache("index out of range".into()));
            }
            entries.push(Triple { i, j, l, weight, umklapp });
        }
        if pos != buf.len() {
            return Err(Error::Cache("trailing bytes".into()));
        }
        let reactions = reactions_from(modes, &entries);
        Ok(Self { modes: modes.clone(), delta_width, cutoff, prefactor, entries, reactions })
    }
}

const CHUNK: usize = 1 << 14;

/// Scatter-add over `items` in fixed-size chunks, merged in chunk order, so
/// the result does not depend on the number of threads.
fn scatter<T: Real, F>(out_len: usize, items: usize, body: F) -> Vec<T>
where
    F: Fn(usize, &mut [T]) + Sync,
{
    let chunks = items.div_ceil(CHUNK);
    let parts: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut buf = vec![T::zero(); out_len];
            for r in c * CHUNK..((c + 1) * CHUNK).min(items) {
                body(r, &mut buf);
            }
            buf
        })
        .collect();
    let mut out = vec![T::zero(); out_len];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o = *o + v;
        }
    }
    out
}

fn reduce<T: Real, F>(items: usize, body: F) -> T
where
    F: Fn(usize) -> T + Sync,
{
    let chunks = items.div_ceil(CHUNK);
    let parts: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(items)).fold(T::zero(), |s, r| s + body(r)))
        .collect();
    parts.into_iter().fold(T::zero(), |s, p| s + p)
}

/// Occupation partner `W̃` used by the raw kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tilde {
    /// `W̃ = 1 + W` (quantum).
    OnePlus,
    /// `W̃ = W` (classical limit).
    Identity,
}

/// Raw three-phonon operator with a selectable `W̃`.
///
/// Each ordered triple `(a, b, c)` contributes the merging term
/// `2w(W̃_b W_c + W_a W_c − W_a W_b)` at `a` and the splitting term
/// `w(W_a W_b − W_c W̃_a − W_c W_b)` at `c`. The classical operator is this
/// function with `Tilde::Identity`.
pub fn collide_raw<T: Real>(
    w: &Occupation<T>,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
    tilde: Tilde,
) -> Result<Vec<T>> {
    triples.check(w)?;
    let v = w.values();
    let e = triples.entries();
    let two = T::lit(2.0);
    let mut out = scatter(v.len(), e.len(), |r, buf| {
        let t = &e[r];
        let (a, b, c) = (t.i as usize, t.j as usize, t.l as usize);
        let (ta, tb) = match tilde {
            Tilde::OnePlus => (T::one() + v[a], T::one() + v[b]),
            Tilde::Identity => (v[a], v[b]),
        };
        buf[a] = buf[a] + two * t.weight * (tb * v[c] + v[a] * v[c] - v[a] * v[b]);
        buf[c] = buf[c] + t.weight * (v[a] * v[b] - v[c] * ta - v[c] * v[b]);
    });
    let scale = params.gamma / T::count(v.len());
    for x in &mut out {
        *x = *x * scale;
    }
    Ok(out)
}

fn require(w: &Occupation<impl Real>, s: Statistics) -> Result<()> {
    if w.statistics() != s {
        return Err(Error::Mismatch(format!(
            "operator expects {s:?} statistics, occupation is {:?}",
            w.statistics()
        )));
    }
    Ok(())
}

/// Classical three-phonon operator, terms (I) and (II) as written.
pub fn collide_classical<T: Real>(
    w: &Occupation<T>,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
) -> Result<Vec<T>> {
    require(w, Statistics::Classical)?;
    collide_raw(w, triples, params, Tilde::Identity)
}

/// Quantum three-phonon operator with `W̃ = 1 + W`.
pub fn collide_quantum<T: Real>(
    w: &Occupation<T>,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
) -> Result<Vec<T>> {
    require(w, Statistics::Quantum)?;
    collide_raw(w, triples, params, Tilde::OnePlus)
}

/// Logarithmic mean `(x − y)/ln(x/y)` of two positive numbers.
#[inline]
pub fn log_mean<T: Real>(x: T, y: T) -> T {
    if x == y {
        return x;
    }
    let u = x.ln() - y.ln();
    if u.abs() < T::lit(1e-4) {
        let u2 = u * u;
        y * (T::one() + u / T::lit(2.0) + u2 / T::lit(6.0) + u2 * u / T::lit(24.0))
    } else {
        (x - y) / u
    }
}

/// Quantum production kernel `f(x, y) = (x − y) ln(x/y)`.
#[inline]
pub fn production_kernel<T: Real>(x: T, y: T) -> T {
    if x == y {
        T::zero()
    } else {
        (x - y) * (x.ln() - y.ln())
    }
}

/// Flux `F` of a reaction under the conservative kernel; the rate of change
/// is `γ/M · weight · F · ν′`.
#[inline]
fn conservative_flux<T: Real>(r: &Reaction<T>, v: &[T], s: Statistics) -> T {
    let (wa, wb, wc) = (v[r.a as usize], v[r.b as usize], v[r.c as usize]);
    let [na, nb, nc] = r.nu;
    match s {
        Statistics::Classical => na * wb * wc + nb * wa * wc + nc * wa * wb,
        Statistics::Quantum => {
            let one = T::one();
            let x = (one + wa) * (one + wb) * wc;
            let y = wa * wb * (one + wc);
            if y > T::zero() && x > T::zero() {
                let psi = |q: T| -(one / q).ln_1p();
                let dot = na * psi(wa) + nb * psi(wb) + nc * psi(wc);
                -log_mean(x, y) * dot
            } else if x > T::zero() {
                // W_a or W_b vanishes: only the gain of the empty slots survives.
                let (mut sum, mut cnt) = (T::zero(), T::zero());
                if wa == T::zero() {
                    sum = sum + na;
                    cnt = cnt + one;
                }
                if wb == T::zero() {
                    sum = sum + nb;
                    cnt = cnt + one;
                }
                x * sum / cnt
            } else if y > T::zero() {
                y * nc
            } else {
                T::zero()
            }
        }
    }
}

/// Energy-conserving three-phonon operator for either statistics.
///
/// Per reaction `a + b ↔ c`, the flux is `F = −m (ν′·ψ)` with
/// `ψ = ln(W/W̃)` and `m` the logarithmic mean of `W̃_aW̃_bW_c` and
/// `W_aW_bW̃_c` (quantum), or `F = Σ ν′_s ∏_{t≠s} W_t` (classical). Since
/// `ω·ν′ = 0`, `Σ ω C′ = 0` holds identically.
pub fn collide_conservative<T: Real>(
    w: &Occupation<T>,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
) -> Result<Vec<T>> {
    triples.check(w)?;
    Ok(collide_values(w.values(), w.statistics(), triples, params, Kernel::Conservative))
}

/// Operator on a bare value slice, without the nonnegativity check of
/// [`Occupation`]. Used by the integrators for intermediate stages.
pub fn collide_values<T: Real>(
    values: &[T],
    statistics: Statistics,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
    kernel: Kernel,
) -> Vec<T> {
    let scale = params.gamma / T::count(values.len());
    let mut out = match kernel {
        Kernel::Conservative => {
            let rs = triples.reactions();
            scatter(values.len(), rs.len(), |k, buf| {
                let r = &rs[k];
                let f = r.weight * conservative_flux(r, values, statistics);
                buf[r.a as usize] = buf[r.a as usize] + f * r.nu[0];
                buf[r.b as usize] = buf[r.b as usize] + f * r.nu[1];
                buf[r.c as usize] = buf[r.c as usize] + f * r.nu[2];
            })
        }
        Kernel::Raw => {
            let e = triples.entries();
            let two = T::lit(2.0);
            let quantum = statistics == Statistics::Quantum;
            scatter(values.len(), e.len(), |r, buf| {
                let t = &e[r];
                let v = values;
                let (a, b, c) = (t.i as usize, t.j as usize, t.l as usize);
                let (ta, tb) = if quantum { (T::one() + v[a], T::one() + v[b]) } else { (v[a], v[b]) };
                buf[a] = buf[a] + two * t.weight * (tb * v[c] + v[a] * v[c] - v[a] * v[b]);
                buf[c] = buf[c] + t.weight * (v[a] * v[b] - v[c] * ta - v[c] * v[b]);
            })
        }
    };
    for x in &mut out {
        *x = *x * scale;
    }
    out
}

/// Applies the requested kernel with the statistics of `w`.
pub fn collide<T: Real>(
    w: &Occupation<T>,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
    kernel: Kernel,
) -> Result<Vec<T>> {
    match (kernel, w.statistics()) {
        (Kernel::Conservative, _) => collide_conservative(w, triples, params),
        (Kernel::Raw, Statistics::Classical) => collide_classical(w, triples, params),
        (Kernel::Raw, Statistics::Quantum) => collide_quantum(w, triples, params),
    }
}

/// Energy per unit volume `∫dk ω W`.
pub fn energy<T: Real>(w: &Occupation<T>, modes: &ModeSet<T>) -> Result<T> {
    if w.grid() != modes.grid() {
        return Err(Error::Mismatch("occupation and mode set grids differ".into()));
    }
    let s = (0..modes.len())
        .filter(|&i| modes.is_active(i))
        .fold(T::zero(), |s, i| s + modes.omega()[i] * w.values()[i]);
    Ok(s / T::count(modes.len()))
}

/// Entropy per unit volume: `∫dk (ln W + ln π + 1)` (classical) or
/// `∫dk (W̃ ln W̃ − W ln W)` (quantum). Inactive points are skipped.
pub fn entropy<T: Real>(w: &Occupation<T>, modes: &ModeSet<T>) -> Result<T> {
    if w.grid() != modes.grid() {
        return Err(Error::Mismatch("occupation and mode set grids differ".into()));
    }
    let v = w.values();
    let c = T::PI().ln() + T::one();
    let mut s = T::zero();
    for i in (0..modes.len()).filter(|&i| modes.is_active(i)) {
        s = s + match w.statistics() {
            Statistics::Classical => {
                if v[i] <= T::zero() {
                    return Err(Error::Domain(format!(
                        "classical entropy needs W > 0, W[{i}] = {}",
                        v[i]
                    )));
                }
                v[i].ln() + c
            }
            Statistics::Quantum => {
                let t = T::one() + v[i];
                let wlw = if v[i] > T::zero() { v[i] * v[i].ln() } else { T::zero() };
                t * t.ln() - wlw
            }
        };
    }
    Ok(s / T::count(modes.len()))
}

/// Entropy production `dS/dt` of the chosen kernel (always ≥ 0).
pub fn entropy_production<T: Real>(
    w: &Occupation<T>,
    triples: &TripleList<T>,
    params: &CollisionParams<T>,
    kernel: Kernel,
) -> Result<T> {
    triples.check(w)?;
    let v = w.values();
    let one = T::one();
    let stats = w.statistics();
    if stats == Statistics::Classical {
        for i in triples.constrained_points() {
            if v[i] <= T::zero() {
                return Err(Error::Domain(format!("classical entropy production needs W > 0 at {i}")));
            }
        }
    }
    let m = T::count(v.len());
    let total = match kernel {
        Kernel::Conservative => {
            let rs = triples.reactions();
            reduce(rs.len(), |k| {
                let r = &rs[k];
                let (wa, wb, wc) = (v[r.a as usize], v[r.b as usize], v[r.c as usize]);
                let [na, nb, nc] = r.nu;
                match stats {
                    Statistics::Classical => {
                        let d = na / wa + nb / wb + nc / wc;
                        r.weight * wa * wb * wc * d * d
                    }
                    Statistics::Quantum => {
                        let f = conservative_flux(r, v, stats);
                        let psi = |q: T| {
                            if q > T::zero() {
                                -(one / q).ln_1p()
                            } else {
                                T::neg_infinity()
                            }
                        };
                        let dot = na * psi(wa) + nb * psi(wb) + nc * psi(wc);
                        if f == T::zero() {
                            T::zero()
                        } else {
                            -r.weight * f * dot
                        }
                    }
                }
            })
        }
        Kernel::Raw => {
            let rs = triples.reactions();
            reduce(rs.len(), |k| {
                let r = &rs[k];
                let (wa, wb, wc) = (v[r.a as usize], v[r.b as usize], v[r.c as usize]);
                match stats {
                    Statistics::Classical => {
                        let d = one / wa + one / wb - one / wc;
                        r.weight * wa * wb * wc * d * d
                    }
                    Statistics::Quantum => {
                        let x = (one + wa) * (one + wb) * wc;
                        let y = wa * wb * (one + wc);
                        if x == T::zero() || y == T::zero() {
                            if x == y {
                                T::zero()
                            } else {
                                T::infinity()
                            }
                        } else {
                            r.weight * production_kernel(x, y)
                        }
                    }
                }
            })
        }
    };
    Ok(params.gamma * total / (m * m))
}

/// Sparse symmetric isotope kernel `K(k, k₁) = 2π𝔼(ξ²) ω ω₁ δ_η(ω − ω₁)/N³`.
///
/// The loss rate of mode `k` is `ν(k) = Σ_{k₁} K(k, k₁) ≈ 2π𝔼(ξ²) ω² τ(ω)`.
#[derive(Clone, Debug)]
pub struct IsotopeKernel<T> {
    pub(crate) row_start: Vec<usize>,
    pub(crate) cols: Vec<u32>,
    pub(crate) vals: Vec<T>,
    variance: T,
    delta_width: T,
    n_points: usize,
}

impl<T: Real> IsotopeKernel<T> {
    pub fn build(modes: &ModeSet<T>, variance: T, delta_width: T, cutoff: T) -> Result<Self> {
        if !(variance >= T::zero()) {
            return invalid(format!("isotope variance must be nonnegative, got {variance}"));
        }
        if !(delta_width > T::zero()) {
            return invalid("delta_width must be positive");
        }
        if !(cutoff >= T::lit(3.0)) {
            return invalid("cutoff must be at least 3");
        }
        let w = modes.omega();
        let m = modes.len();
        // Sort by frequency so each shell window is a contiguous range.
        let mut order: Vec<usize> = modes.active_indices();
        order.sort_by(|&a, &b| w[a].partial_cmp(&w[b]).expect("finite").then(a.cmp(&b)));
        let sorted: Vec<T> = order.iter().map(|&i| w[i]).collect();
        let window = cutoff * delta_width;
        let scale = T::two_pi() * variance / T::count(m);
        let rows: Vec<Vec<(u32, T)>> = (0..m)
            .into_par_iter()
            .map(|i| {
                if !modes.is_active(i) || variance == T::zero() {
                    return Vec::new();
                }
                let lo = sorted.partition_point(|&x| x < w[i] - window * T::lit(1.01));
                let hi = sorted.partition_point(|&x| x <= w[i] + window * T::lit(1.01));
                // Symmetric membership test, so K(k, k₁) and K(k₁, k) are both stored.
                let mut row: Vec<(u32, T)> = order[lo..hi]
                    .iter()
                    .filter(|&&j| (w[i] - w[j]).abs() <= window)
                    .map(|&j| (j as u32, scale * (w[i] * w[j]) * mollified_delta(w[i] - w[j], delta_width)))
                    .collect();
                row.sort_by_key(|e| e.0);
                row
            })
            .collect();
        let mut row_start = Vec::with_capacity(m + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_start.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_start.push(cols.len());
        }
        Ok(Self { row_start, cols, vals, variance, delta_width, n_points: m })
    }

    pub fn variance(&self) -> T {
        self.variance
    }

    pub fn delta_width(&self) -> T {
        self.delta_width
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[T]) {
        let (s, e) = (self.row_start[i], self.row_start[i + 1]);
        (&self.cols[s..e], &self.vals[s..e])
    }

    /// Total jump rate `ν(k) = Σ_{k₁} K(k, k₁)`, self-jumps included.
    pub fn total_rate(&self, i: usize) -> T {
        self.row(i).1.iter().fold(T::zero(), |s, &v| s + v)
    }

    /// `dW(k) = Σ_{k₁} K(k, k₁) (W(k₁) − W(k))` on a raw value slice.
    pub fn apply(&self, w: &[T]) -> Vec<T> {
        (0..self.n_points)
            .into_par_iter()
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).fold(T::zero(), |s, (&j, &k)| s + k * (w[j as usize] - w[i]))
            })
            .collect()
    }
}

/// Isotope collision operator on an occupation.
pub fn collide_isotope<T: Real>(w: &Occupation<T>, kernel: &IsotopeKernel<T>) -> Result<Vec<T>> {
    if w.grid().len() != kernel.n_points {
        return Err(Error::Mismatch("isotope kernel built on a different grid".into()));
    }
    Ok(kernel.apply(w.values()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{BrillouinGrid, DispersionModel};
    use rand::Rng;

    fn modes(n: usize, w0: f64) -> ModeSet<f64> {
        ModeSet::new(DispersionModel::NextNearestPaper { omega0: w0 }, BrillouinGrid::new(n).unwrap())
            .unwrap()
    }

    fn random_occ(m: &ModeSet<f64>, s: Statistics, seed: u64) -> Occupation<f64> {
        let mut r = crate::rng::stream(seed, 0);
        let v = (0..m.len())
            .map(|i| if m.is_active(i) { 0.2 + r.random::<f64>() } else { 0.0 })
            .collect();
        Occupation::new(m.grid(), v, s).unwrap()
    }

    #[test]
    fn nearest_neighbor_has_no_triples() {
        let m = ModeSet::new(DispersionModel::NearestNeighbor { omega0: 1.0 }, BrillouinGrid::new(8).unwrap())
            .unwrap();
        let t = build_triples(&m, 0.1, 3.0, PrefactorKind::OnSite).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn symmetric_closure_and_window() {
        let m = modes(8, 1.0);
        let eta = m.model().default_delta_width(&m.grid());
        let t = build_triples(&m, eta, 3.0, PrefactorKind::OnSite).unwrap();
        assert!(!t.is_empty());
        for e in t.entries() {
            let s = t.find(e.j as usize, e.i as usize).unwrap();
            assert_eq!(s.weight, e.weight);
            assert_eq!(s.l, e.l);
            let w = m.omega();
            assert!((w[e.i as usize] + w[e.j as usize] - w[e.l as usize]).abs() <= 3.0 * eta);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let m = modes(4, 1.0);
        assert!(build_triples(&m, 0.0, 3.0, PrefactorKind::OnSite).is_err());
        assert!(build_triples(&m, 0.1, 2.0, PrefactorKind::OnSite).is_err());
    }

    #[test]
    fn zero_occupation_is_stationary() {
        let m = modes(6, 1.0);
        let t = build_triples(&m, 0.6, 3.0, PrefactorKind::OnSite).unwrap();
        let p = CollisionParams::from_lambda(1.0, 1.0);
        let z = Occupation::new(m.grid(), vec![0.0; m.len()], Statistics::Classical).unwrap();
        assert!(collide_classical(&z, &t, &p).unwrap().iter().all(|&x| x == 0.0));
        assert!(collide_conservative(&z, &t, &p).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn quantum_with_identity_tilde_is_classical() {
        let m = modes(6, 1.0);
        let t = build_triples(&m, 0.6, 3.0, PrefactorKind::OnSite).unwrap();
        let p = CollisionParams::from_lambda(0.7, 1.0);
        let w = random_occ(&m, Statistics::Classical, 3);
        let a = collide_classical(&w, &t, &p).unwrap();
        let b = collide_raw(&w.clone().with_statistics(Statistics::Quantum), &t, &p, Tilde::Identity).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conservative_kernel_conserves_energy_exactly() {
        let m = modes(8, 1.0);
        let t = build_triples(&m, 0.5, 3.0, PrefactorKind::OnSite).unwrap();
        let p = CollisionParams::from_lambda(1.0, 1.0);
        for s in [Statistics::Classical, Statistics::Quantum] {
            let w = random_occ(&m, s, 11);
            let d = collide_conservative(&w, &t, &p).unwrap();
            let de: f64 = d.iter().zip(m.omega()).map(|(a, b)| a * b).sum();
            let scale: f64 = d.iter().zip(m.omega()).map(|(a, b)| (a * b).abs()).sum();
            assert!(de.abs() <= 1e-13 * scale, "{s:?}: {de} vs {scale}");
        }
    }

    #[test]
    fn conservative_kernel_fixes_every_equilibrium() {
        let m = modes(8, 1.0);
        let t = build_triples(&m, 0.5, 3.0, PrefactorKind::OnSite).unwrap();
        let p = CollisionParams::from_lambda(1.0, 1.0);
        for s in [Statistics::Classical, Statistics::Quantum] {
            for beta in [0.3, 1.0, 4.0] {
                let w = m.equilibrium(beta, s).unwrap();
                let d = collide_conservative(&w, &t, &p).unwrap();
                let scale = w.values().iter().fold(0.0f64, |a, &b| a.max(b));
                assert!(d.iter().all(|x| x.abs() <= 1e-12 * scale * scale), "{s:?} {beta}");
            }
        }
    }

    #[test]
    fn gain_only_at_empty_mode() {
        let m = modes(8, 1.0);
        let t = build_triples(&m, 0.5, 3.0, PrefactorKind::OnSite).unwrap();
        let p = CollisionParams::from_lambda(1.0, 1.0);
        let k = t.constrained_points()[5];
        for s in [Statistics::Classical, Statistics::Quantum] {
            let mut v = random_occ(&m, s, 5).into_values();
            v[k] = 0.0;
            let w = Occupation::new(m.grid(), v, s).unwrap();
            for kernel in [Kernel::Raw, Kernel::Conservative] {
                let d = collide(&w, &t, &p, kernel).unwrap();
                assert!(d[k] > 0.0, "{s:?} {kernel:?}: {}", d[k]);
            }
        }
    }

    #[test]
    fn production_kernel_values() {
        assert_eq!(production_kernel(1.7, 1.7), 0.0);
        assert!((production_kernel(2.0f64, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((log_mean(2.0f64, 1.0) - 1.0 / 2f64.ln()).abs() < 1e-14);
        let (x, y) = (1.0 + 1e-7, 1.0f64);
        assert!((log_mean(x, y) - (x - y) / (x / y).ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_production_matches_entropy_derivative() {
        let m = modes(6, 1.0);
        let t = build_triples(&m, 0.6, 3.0, PrefactorKind::OnSite).unwrap();
        let p = CollisionParams::from_lambda(1.0, 1.0);
        for s in [Statistics::Classical, Statistics::Quantum] {
            let w = random_occ(&m, s, 2);
            for kernel in [Kernel::Raw, Kernel::Conservative] {
                let d = collide(&w, &t, &p, kernel).unwrap();
                let h = 1e-6;
                let plus: Vec<f64> = w.values().iter().zip(&d).map(|(a, b)| a + h * b).collect();
                let minus: Vec<f64> = w.values().iter().zip(&d).map(|(a, b)| a - h * b).collect();
                let sp = entropy(&Occupation::new(m.grid(), plus, s).unwrap(), &m).unwrap();
                let sm = entropy(&Occupation::new(m.grid(), minus, s).unwrap(), &m).unwrap();
                let fd = (sp - sm) / (2.0 * h);
                let sigma = entropy_production(&w, &t, &p, kernel).unwrap();
                assert!(sigma >= 0.0);
                assert!((fd - sigma).abs() <= 1e-6 * sigma.abs().max(1e-12), "{s:?} {kernel:?}: {fd} {sigma}");
            }
        }
    }

    #[test]
    fn classical_entropy_rejects_zero() {
        let m = modes(4, 1.0);
        let w = Occupation::new(m.grid(), vec![0.0; m.len()], Statistics::Classical).unwrap();
        assert!(matches!(entropy(&w, &m), Err(Error::Domain(_))));
        let q = w.with_statistics(Statistics::Quantum);
        assert_eq!(entropy(&q, &m).unwrap(), 0.0);
    }

    #[test]
    fn isotope_conserves_number_and_kills_shell_functions() {
        let m = modes(8, 1.0);
        let eta = m.model().default_delta_width(&m.grid());
        let k = IsotopeKernel::build(&m, 0.3, eta, 5.0).unwrap();
        let w = random_occ(&m, Statistics::Classical, 4);
        let d = collide_isotope(&w, &k).unwrap();
        let total: f64 = d.iter().sum();
        let scale: f64 = d.iter().map(|x| x.abs()).sum();
        assert!(total.abs() <= 1e-13 * scale);
        let zero = IsotopeKernel::build(&m, 0.0, eta, 5.0).unwrap();
        assert_eq!(zero.nnz(), 0);
    }

    #[test]
    fn cache_round_trip() {
        let m = modes(6, 1.0);
        let t = build_triples(&m, 0.6, 3.0, PrefactorKind::DifferenceCoupling).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.phtr");
        t.save(&path).unwrap();
        let u = TripleList::load(&path, &m, 0.6, 3.0, PrefactorKind::DifferenceCoupling).unwrap();
        assert_eq!(t.entries(), u.entries());
        assert!(matches!(
            TripleList::load(&path, &m, 0.5, 3.0, PrefactorKind::DifferenceCoupling),
            Err(Error::Cache(_))
        ));
        let other = modes(6, 0.5);
        assert!(TripleList::load(&path, &other, 0.6, 3.0, PrefactorKind::DifferenceCoupling).is_err());
    }

    #[test]
    fn fejer_kernel_has_unit_mass() {
        let tau = 7.0f64;
        let h = 1e-3;
        let mass: f64 = (-200_000..=200_000).map(|i| fejer_kernel(i as f64 * h, tau) * h).sum();
        // tail beyond |E| = 200 carries about 2/(π τ 200)
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        assert!((fejer_kernel(0.0, tau) - tau / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!((fejer_kernel(1e-7, tau) - fejer_kernel(1e-3 / tau, tau)).abs() < 1e-6);
    }
}
