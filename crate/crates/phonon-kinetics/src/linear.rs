//! Linear response: the linearized three-phonon operator `L`, the isotope
//! operator `Lᵢ`, collisional invariants, and thermal conductivity.
//!
//! With `W = W_β + W_βW̃_β f` the collision term is `C(W) ≈ −L f`. All
//! operators act on the active grid points only. Dense factorizations are
//! carried out in `f64` through LAPACK whatever the scalar type.

use crate::collision::{log_mean, IsotopeKernel, TripleList};
use crate::error::{invalid, Error, Result};
use crate::modes::{equilibrium_value, equilibrium_weight, ModeSet, Statistics};
use crate::rng;
use crate::scalar::Real;
use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::{EigValsh, Eigh, FactorizeC, SolveC, QR, UPLO};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Stoichiometry vectors used for the reaction rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stoichiometry {
    /// Energy-projected `ν′` (matches the conservative kernel).
    #[default]
    Projected,
    /// `e_a + e_b − e_c`.
    Raw,
}

/// Dense symmetric operator on the active grid points.
#[derive(Clone, Debug)]
pub struct LinearizedOperator<T> {
    pub beta: T,
    pub statistics: Statistics,
    /// Grid index of each row.
    pub points: Vec<usize>,
    pub matrix: Array2<T>,
    grid_len: usize,
}

fn positions<T: Real>(modes: &ModeSet<T>) -> (Vec<usize>, Vec<Option<usize>>) {
    let points = modes.active_indices();
    let mut pos = vec![None; modes.len()];
    for (r, &i) in points.iter().enumerate() {
        pos[i] = Some(r);
    }
    (points, pos)
}

fn check_beta<T: Real>(beta: T) -> Result<()> {
    if !(beta > T::zero()) || !beta.is_finite() {
        return invalid(format!("beta must be positive, got {beta}"));
    }
    Ok(())
}

/// Stoichiometry of a reaction as (slot index, coefficient) with repeated slots merged.
fn rows<T: Real>(a: usize, b: usize, c: usize, nu: [T; 3], kind: Stoichiometry) -> ([usize; 3], [T; 3], usize) {
    let nu = match kind {
        Stoichiometry::Projected => nu,
        Stoichiometry::Raw => [T::one(), T::one(), -T::one()],
    };
    if a == b {
        ([a, c, c], [nu[0] + nu[1], nu[2], T::zero()], 2)
    } else {
        ([a, b, c], nu, 3)
    }
}

/// Linearized three-phonon operator from the quadratic form
/// `⟨g, L f⟩ = γ/N³ Σ w W_aW_bW̃_c (ν·g)(ν·f)` (classical: `W = W̃ = 1/βω`).
pub fn assemble_l<T: Real>(
    triples: &TripleList<T>,
    gamma: T,
    beta: T,
    statistics: Statistics,
    stoichiometry: Stoichiometry,
) -> Result<LinearizedOperator<T>> {
    check_beta(beta)?;
    let modes = triples.modes();
    let (points, pos) = positions(modes);
    let n = points.len();
    let mut matrix = Array2::<T>::zeros((n, n));
    let w = modes.omega();
    let occ = |i: usize| equilibrium_value(beta, w[i], statistics);
    let tilde = |i: usize| match statistics {
        Statistics::Classical => occ(i),
        Statistics::Quantum => T::one() + occ(i),
    };
    let scale = gamma / T::count(modes.len());
    for r in triples.reactions() {
        let (a, b, c) = (r.a as usize, r.b as usize, r.c as usize);
        let y = occ(a) * occ(b) * tilde(c);
        // The conservative kernel linearizes with the logarithmic mean of the
        // forward and backward products, which differ by e^{βE} off shell.
        let m = match (stoichiometry, statistics) {
            (Stoichiometry::Projected, Statistics::Quantum) => log_mean(tilde(a) * tilde(b) * occ(c), y),
            _ => y,
        };
        let coef = scale * r.weight * m;
        let (idx, val, len) = rows(a, b, c, r.nu, stoichiometry);
        for p in 0..len {
            let ip = pos[idx[p]].expect("reaction on an active point");
            for q in 0..len {
                let iq = pos[idx[q]].expect("reaction on an active point");
                if ip <= iq {
                    matrix[[ip, iq]] = matrix[[ip, iq]] + coef * val[p] * val[q];
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            matrix[[i, j]] = matrix[[j, i]];
        }
    }
    Ok(LinearizedOperator { beta, statistics, points, matrix, grid_len: modes.len() })
}

/// Isotope operator `Lᵢ = diag(Σ S) − S` with `S(k, k₁) = K(k, k₁)(D D₁)^½`,
/// `D = W_βW̃_β`.
pub fn assemble_li<T: Real>(
    modes: &ModeSet<T>,
    kernel: &IsotopeKernel<T>,
    beta: T,
    statistics: Statistics,
) -> Result<LinearizedOperator<T>> {
    check_beta(beta)?;
    let (points, pos) = positions(modes);
    let n = points.len();
    let w = modes.omega();
    let d: Vec<T> = w.iter().map(|&x| if x > T::zero() { equilibrium_weight(beta, x, statistics) } else { T::zero() }).collect();
    let mut matrix = Array2::<T>::zeros((n, n));
    for (r, &i) in points.iter().enumerate() {
        let (cols, vals) = kernel.row(i);
        for (&j, &k) in cols.iter().zip(vals) {
            let j = j as usize;
            let s = k * (d[i] * d[j]).sqrt();
            let q = pos[j].expect("isotope kernel on an active point");
            matrix[[r, r]] = matrix[[r, r]] + s;
            matrix[[r, q]] = matrix[[r, q]] - s;
        }
    }
    Ok(LinearizedOperator { beta, statistics, points, matrix, grid_len: modes.len() })
}

impl<T: Real> LinearizedOperator<T> {
    pub fn dim(&self) -> usize {
        self.points.len()
    }

    /// Matrix sum, for operators at the same `β` on the same points.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.points != other.points || self.beta != other.beta || self.statistics != other.statistics {
            return Err(Error::Mismatch("operators differ in points, beta or statistics".into()));
        }
        Ok(Self { matrix: &self.matrix + &other.matrix, ..self.clone() })
    }

    /// Restricts a full-grid vector to the operator's points.
    pub fn restrict(&self, full: &[T]) -> Array1<T> {
        self.points.iter().map(|&i| full[i]).collect()
    }

    /// Extends a vector on the operator's points to the full grid (zeros elsewhere).
    pub fn extend(&self, v: &Array1<T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.grid_len];
        for (r, &i) in self.points.iter().enumerate() {
            out[i] = v[r];
        }
        out
    }

    pub fn apply(&self, v: &Array1<T>) -> Array1<T> {
        mat_vec(&self.matrix, v)
    }

    /// `max |A − Aᵀ|`.
    pub fn symmetry_defect(&self) -> T {
        let n = self.dim();
        let mut d = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                d = d.max((self.matrix[[i, j]] - self.matrix[[j, i]]).abs());
            }
        }
        d
    }

    /// Largest eigenvalue by power iteration (the operator is PSD).
    pub fn norm_estimate(&self, iterations: usize) -> T {
        let n = self.dim();
        if n == 0 {
            return T::zero();
        }
        let mut x = Array1::from_shape_fn(n, |i| T::one() + T::lit(((i * 37) % 11) as f64 / 11.0));
        let mut lam = T::zero();
        for _ in 0..iterations {
            let nx = dot(&x, &x).sqrt();
            if nx == T::zero() {
                return T::zero();
            }
            x.mapv_inplace(|v| v / nx);
            let y = self.apply(&x);
            lam = dot(&x, &y);
            x = y;
        }
        lam
    }

    /// All eigenvalues, ascending (dense LAPACK solve).
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let m = self.matrix.mapv(|v| v.as_f64());
        let e = m.eigvalsh(UPLO::Lower).map_err(|e| Error::Linalg(e.to_string()))?;
        Ok(e.to_vec())
    }
}

fn dot<T: Real>(a: &Array1<T>, b: &Array1<T>) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

fn mat_vec<T: Real>(m: &Array2<T>, v: &Array1<T>) -> Array1<T> {
    m.axis_iter(Axis(0)).map(|row| row.iter().zip(v).fold(T::zero(), |s, (a, b)| s + *a * *b)).collect()
}

/// Result of the collisional-invariant analysis.
#[derive(Clone, Debug, Serialize)]
pub struct InvariantReport {
    pub constrained_point_count: usize,
    pub null_dimension: usize,
    /// Norm of the projection of `ω/‖ω‖` onto the numerical null space, or
    /// the cosine to the best vector when the null space is empty.
    pub cosine_to_omega: f64,
    /// Active points that appear in no triple, plus masked points.
    pub unconstrained_points: Vec<usize>,
    /// Smallest singular values divided by `σ_max`, ascending.
    pub smallest_singular_ratios: Vec<f64>,
    pub sigma_max: f64,
    /// True when every computed singular value was below threshold, so the
    /// dimension is only a lower bound.
    pub saturated: bool,
}

/// Null space of the reaction rows `ν` over the constrained points.
///
/// The smallest singular values come from shift-invert subspace iteration on
/// the Gram matrix `G = AᵀA`; each Ritz vector is then rescored by the direct
/// residual `‖A v‖`, which resolves σ far below `√ε·σ_max`.
pub fn invariant_nullspace<T: Real>(triples: &TripleList<T>, stoichiometry: Stoichiometry) -> Result<InvariantReport> {
    let modes = triples.modes();
    let constrained = triples.constrained_points();
    let mut unconstrained: Vec<usize> = (0..modes.len()).filter(|i| constrained.binary_search(i).is_err()).collect();
    unconstrained.sort_unstable();
    let n = constrained.len();
    if n == 0 {
        return Ok(InvariantReport {
            constrained_point_count: 0,
            null_dimension: 0,
            cosine_to_omega: 0.0,
            unconstrained_points: unconstrained,
            smallest_singular_ratios: Vec::new(),
            sigma_max: 0.0,
            saturated: false,
        });
    }
    let mut pos = vec![usize::MAX; modes.len()];
    for (r, &i) in constrained.iter().enumerate() {
        pos[i] = r;
    }
    // Each unordered reaction stands for its ordered rows (two when a ≠ b).
    let reaction_rows: Vec<([usize; 3], [f64; 3], usize, f64)> = triples
        .reactions()
        .iter()
        .map(|r| {
            let (idx, val, len) = rows(r.a as usize, r.b as usize, r.c as usize, r.nu, stoichiometry);
            let mult = if r.a == r.b { 1.0 } else { 2.0 };
            ([pos[idx[0]], pos[idx[1]], pos[idx[2].min(modes.len() - 1)]], val.map(|v| v.as_f64()), len, mult)
        })
        .collect();
    let mut g = Array2::<f64>::zeros((n, n));
    for (idx, val, len, mult) in &reaction_rows {
        for p in 0..*len {
            for q in 0..*len {
                g[[idx[p], idx[q]]] += mult * val[p] * val[q];
            }
        }
    }
    let residual = |v: ndarray::ArrayView1<f64>| -> f64 {
        reaction_rows
            .iter()
            .map(|(idx, val, len, mult)| {
                let s: f64 = (0..*len).map(|p| val[p] * v[idx[p]]).sum();
                mult * s * s
            })
            .sum::<f64>()
            .sqrt()
    };

    // σ_max² by power iteration on G.
    let mut x = Array1::<f64>::from_elem(n, 1.0);
    x[0] = 2.0;
    let mut lmax = 0.0;
    for _ in 0..100 {
        let nx = x.dot(&x).sqrt();
        x /= nx;
        let y = g.dot(&x);
        lmax = x.dot(&y);
        x = y;
    }
    let sigma_max = lmax.sqrt();

    let p = n.min(6);
    let mu = 1e-10 * lmax;
    let mut shifted = g.clone();
    for i in 0..n {
        shifted[[i, i]] += mu;
    }
    let chol = shifted.factorizec(UPLO::Lower).map_err(|e| Error::Linalg(e.to_string()))?;
    let mut r = rng::stream(0x6e75_6c6c, 0);
    let mut q = Array2::<f64>::from_shape_fn((n, p), |_| StandardNormal.sample(&mut r));
    for _ in 0..25 {
        let mut z = Array2::<f64>::zeros((n, p));
        for c in 0..p {
            let col = chol.solvec(&q.column(c).to_owned()).map_err(|e| Error::Linalg(e.to_string()))?;
            z.column_mut(c).assign(&col);
        }
        q = z.qr().map_err(|e| Error::Linalg(e.to_string()))?.0;
    }
    let h = q.t().dot(&g.dot(&q));
    let (_, v) = h.eigh(UPLO::Lower).map_err(|e| Error::Linalg(e.to_string()))?;
    let ritz = q.dot(&v);
    let mut scored: Vec<(f64, usize)> = (0..p).map(|c| (residual(ritz.column(c)) / sigma_max, c)).collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite residuals"));
    let null: Vec<usize> = scored.iter().filter(|s| s.0 < 1e-8).map(|s| s.1).collect();

    let omega: Array1<f64> = constrained.iter().map(|&i| modes.omega()[i].as_f64()).collect();
    let omega = &omega / omega.dot(&omega).sqrt();
    let cosine = if null.is_empty() {
        let c = ritz.column(scored[0].1);
        (c.dot(&omega) / c.dot(&c).sqrt()).abs()
    } else {
        // Ritz vectors are orthonormal, so this is the projection norm.
        null.iter().map(|&c| ritz.column(c).dot(&omega).powi(2)).sum::<f64>().sqrt()
    };
    Ok(InvariantReport {
        constrained_point_count: n,
        null_dimension: null.len(),
        cosine_to_omega: cosine,
        unconstrained_points: unconstrained,
        smallest_singular_ratios: scored.iter().map(|s| s.0).collect(),
        sigma_max,
        saturated: null.len() == p && p < n,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConductivityResult<T> {
    /// `κ_{αα′}`.
    pub kappa: [[T; 3]; 3],
    pub temperature: T,
    pub component: String,
    pub cg_iterations: usize,
    pub relative_residual: T,
    /// `Σ |v₁| τ x b / Σ x b`, with relaxation time `τ = D x / b` of the
    /// axis-1 solution `x`.
    pub mean_free_path: T,
}

impl<T: Real> ConductivityResult<T> {
    pub fn max_off_diagonal_ratio(&self) -> T {
        let k = &self.kappa;
        let diag = k[0][0].min(k[1][1]).min(k[2][2]);
        let off = k[0][1].abs().max(k[0][2].abs()).max(k[1][2].abs()).max(k[1][0].abs()).max(k[2][0].abs()).max(k[2][1].abs());
        off / diag
    }

    pub fn csv_row(&self) -> String {
        let k = &self.kappa;
        format!(
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}\n",
            self.temperature, k[0][0], k[1][1], k[2][2], k[0][1], k[0][2], k[1][2], self.component
        )
    }
}

pub const CONDUCTIVITY_CSV_HEADER: &str = "T,kappa11,kappa22,kappa33,kappa12,kappa13,kappa23,component\n";

/// Conjugate gradients for `A x = b` on the complement of `deflate`.
pub fn projected_cg<T: Real>(
    op: &LinearizedOperator<T>,
    b: &Array1<T>,
    deflate: &Array1<T>,
    tol: T,
    max_iter: usize,
) -> Result<(Array1<T>, usize, T)> {
    let dd = dot(deflate, deflate);
    let proj = |v: &mut Array1<T>| {
        if dd > T::zero() {
            let c = dot(v, deflate) / dd;
            v.zip_mut_with(deflate, |x, d| *x = *x - c * *d);
        }
    };
    let mut rhs = b.clone();
    proj(&mut rhs);
    let bn = dot(&rhs, &rhs).sqrt();
    let n = b.len();
    if bn == T::zero() {
        return Ok((Array1::zeros(n), 0, T::zero()));
    }
    let mut x = Array1::<T>::zeros(n);
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 1..=max_iter {
        let mut ap = op.apply(&p);
        proj(&mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return Err(Error::NotConverged(format!("CG breakdown at iteration {it} (pAp = {pap:e})")));
        }
        let alpha = rr / pap;
        x.zip_mut_with(&p, |xi, pi| *xi = *xi + alpha * *pi);
        r.zip_mut_with(&ap, |ri, ai| *ri = *ri - alpha * *ai);
        let rr_new = dot(&r, &r);
        let rel = rr_new.sqrt() / bn;
        if rel <= tol {
            // Recompute the true residual before accepting.
            let mut ax = op.apply(&x);
            proj(&mut ax);
            let true_rel = (&rhs - &ax).iter().fold(T::zero(), |s, v| s + *v * *v).sqrt() / bn;
            if true_rel <= tol * T::lit(10.0) {
                proj(&mut x);
                return Ok((x, it, true_rel));
            }
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p = &r + &p.mapv(|v| v * beta);
    }
    Err(Error::NotConverged(format!("CG did not reach {tol:e} in {max_iter} iterations")))
}

/// Thermal conductivity tensor
/// `κ_{αα′} = β²(2π)⁻² N⁻³ ⟨b_α, L⁻¹ b_α′⟩`, `b_α = W_βW̃_β ω ∂_αω`,
/// with `L⁻¹` taken on the complement of `ω`.
///
/// `gate` is the invariant analysis of the three-phonon rows; a null space of
/// dimension above one, or current-carrying modes that no collision reaches,
/// refuse with an ergodicity error.
pub fn conductivity<T: Real>(
    op: &LinearizedOperator<T>,
    modes: &ModeSet<T>,
    gate: Option<&InvariantReport>,
    component: &str,
) -> Result<ConductivityResult<T>> {
    if let Some(g) = gate {
        if g.null_dimension > 1 {
            return Err(Error::Ergodicity(format!(
                "collisional invariants span {} dimensions; conductivity is ill-posed",
                g.null_dimension
            )));
        }
    }
    let beta = op.beta;
    let stats = op.statistics;
    let w = modes.omega();
    let grads: Vec<[T; 3]> = op.points.iter().map(|&i| modes.group_velocity(i).map(|v| v * T::two_pi())).collect();
    let d: Vec<T> = op.points.iter().map(|&i| equilibrium_weight(beta, w[i], stats)).collect();
    let omega: Array1<T> = op.points.iter().map(|&i| w[i]).collect();
    let diag_scale = (0..op.dim()).fold(T::zero(), |m, r| m.max(op.matrix[[r, r]].abs()));
    let b: Vec<Array1<T>> = (0..3)
        .map(|a| (0..op.dim()).map(|r| d[r] * omega[r] * grads[r][a]).collect())
        .collect();
    for (a, ba) in b.iter().enumerate() {
        for r in 0..op.dim() {
            if op.matrix[[r, r]] <= T::lit(1e-14) * diag_scale && ba[r].abs() > T::zero() {
                return Err(Error::Ergodicity(format!(
                    "mode {} carries current along axis {} but takes part in no collision",
                    op.points[r],
                    a + 1
                )));
            }
        }
        let c = dot(ba, &omega) / (dot(ba, ba).sqrt() * dot(&omega, &omega).sqrt());
        if c.abs() > T::lit(1e-8) {
            return invalid(format!("source term not orthogonal to omega (cosine {c:e})"));
        }
    }
    let tol = T::lit(1e-8);
    let mut xs = Vec::with_capacity(3);
    let mut iters = 0;
    let mut resid = T::zero();
    for ba in &b {
        let (x, it, res) = projected_cg(op, ba, &omega, tol, 20 * op.dim().max(50))?;
        iters = iters.max(it);
        resid = resid.max(res);
        xs.push(x);
    }
    let pref = beta * beta / (T::two_pi() * T::two_pi() * T::count(modes.len()));
    let mut kappa = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for c in 0..3 {
            kappa[a][c] = pref * dot(&b[a], &xs[c]);
        }
    }
    let (mut num, mut den) = (T::zero(), T::zero());
    for r in 0..op.dim() {
        let xb = xs[0][r] * b[0][r];
        if b[0][r] != T::zero() && xb > T::zero() {
            let tau = d[r] * xs[0][r] / b[0][r];
            num = num + grads[r][0].abs() / T::two_pi() * tau * xb;
            den = den + xb;
        }
    }
    Ok(ConductivityResult {
        kappa,
        temperature: T::one() / beta,
        component: component.to_string(),
        cg_iterations: iters,
        relative_residual: resid,
        mean_free_path: if den > T::zero() { num / den } else { T::zero() },
    })
}

/// Isotope-only conductivity from the relaxation-time form
/// `κᵢ = ⅓β²(2π)⁻²(2π𝔼ξ²)⁻¹ ∫dk W_βW̃_β |∇ω|²/τ(ω)`, with `τ` the mollified
/// grid density of states at the same `η`.
pub fn isotope_conductivity_closed_form<T: Real>(
    modes: &ModeSet<T>,
    variance: T,
    beta: T,
    statistics: Statistics,
    delta_width: T,
) -> Result<T> {
    check_beta(beta)?;
    if !(variance > T::zero()) {
        return invalid("closed form needs a positive isotope variance");
    }
    let w = modes.omega();
    let active = modes.active_indices();
    let m = T::count(modes.len());
    let mut s = T::zero();
    for &i in &active {
        let tau = active
            .iter()
            .fold(T::zero(), |t, &j| t + crate::scalar::mollified_delta(w[i] - w[j], delta_width))
            / m;
        let g = modes.group_velocity(i).map(|v| v * T::two_pi());
        let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
        s = s + equilibrium_weight(beta, w[i], statistics) * g2 / tau;
    }
    let two_pi = T::two_pi();
    Ok(beta * beta / (T::lit(3.0) * two_pi * two_pi * two_pi * variance) * s / m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{build_triples, collide_values, CollisionParams, Kernel, PrefactorKind};
    use crate::lattice::{BrillouinGrid, DispersionModel};

    fn setup(n: usize, w0: f64) -> TripleList<f64> {
        let m = ModeSet::new(DispersionModel::NextNearestPaper { omega0: w0 }, BrillouinGrid::new(n).unwrap()).unwrap();
        let eta = m.model().default_delta_width(&m.grid());
        build_triples(&m, eta, 3.0, PrefactorKind::OnSite).unwrap()
    }

    #[test]
    fn projected_operator_annihilates_omega() {
        let t = setup(6, 1.0);
        let op = assemble_l(&t, 1.0, 1.0, Statistics::Quantum, Stoichiometry::Projected).unwrap();
        let w = op.restrict(t.modes().omega());
        let lw = op.apply(&w);
        let rel = dot(&lw, &lw).sqrt() / (op.norm_estimate(50) * dot(&w, &w).sqrt());
        assert_eq!(op.symmetry_defect(), 0.0);
        assert!(rel < 1e-12);
    }

    #[test]
    fn operator_is_derivative_of_conservative_kernel() {
        let t = setup(6, 1.0);
        let m = t.modes();
        let p = CollisionParams::from_gamma(0.8, 1.0).unwrap();
        for s in [Statistics::Classical, Statistics::Quantum] {
            let op = assemble_l(&t, p.gamma, 1.3, s, Stoichiometry::Projected).unwrap();
            let weq = m.equilibrium(1.3, s).unwrap().into_values();
            let f: Vec<f64> = (0..m.len()).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.4).collect();
            let eps = 1e-6;
            let pert: Vec<f64> = (0..m.len())
                .map(|i| if m.is_active(i) { weq[i] + eps * equilibrium_weight(1.3, m.omega()[i], s) * f[i] } else { 0.0 })
                .collect();
            let c1 = collide_values(&pert, s, &t, &p, Kernel::Conservative);
            let c0 = collide_values(&weq, s, &t, &p, Kernel::Conservative);
            let lf = op.extend(&op.apply(&op.restrict(&f)));
            let scale = lf.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for i in 0..m.len() {
                let fd = (c1[i] - c0[i]) / eps;
                assert!((fd + lf[i]).abs() < 1e-5 * scale, "{s:?} {i}: {fd} {}", lf[i]);
            }
        }
    }

    #[test]
    fn nullspace_of_projected_rows_is_omega() {
        let t = setup(8, 0.0);
        let rep = invariant_nullspace(&t, Stoichiometry::Projected).unwrap();
        assert_eq!(rep.null_dimension, 1, "{:?}", rep.smallest_singular_ratios);
        assert!(rep.cosine_to_omega > 0.999);
        assert!(rep.unconstrained_points.contains(&0));
    }

    #[test]
    fn empty_triples_report_nothing_constrained() {
        let m = ModeSet::new(DispersionModel::NearestNeighbor { omega0: 1.0 }, BrillouinGrid::new(4).unwrap()).unwrap();
        let t = build_triples(&m, 0.1, 3.0, PrefactorKind::OnSite).unwrap();
        let rep = invariant_nullspace(&t, Stoichiometry::Projected).unwrap();
        assert_eq!(rep.null_dimension, 0);
        assert_eq!(rep.constrained_point_count, 0);
        assert_eq!(rep.unconstrained_points.len(), 64);
    }

    #[test]
    fn classical_conductivity_scales_as_inverse_temperature() {
        let t = setup(6, 0.0);
        let m = t.modes();
        let k = |beta: f64| {
            let op = assemble_l(&t, 1.0, beta, Statistics::Classical, Stoichiometry::Projected).unwrap();
            conductivity(&op, m, None, "anharmonic").unwrap().kappa[0][0]
        };
        let (a, b) = (k(0.2), k(0.1));
        assert!(a > 0.0);
        assert!((a * 5.0 - b * 10.0).abs() < 1e-6 * a * 5.0, "{a} {b}");
    }

    #[test]
    fn isotope_operator_is_a_shell_laplacian() {
        let t = setup(6, 1.0);
        let m = t.modes();
        let eta = m.model().default_delta_width(&m.grid());
        let ker = IsotopeKernel::build(m, 0.2, eta, 5.0).unwrap();
        let op = assemble_li(m, &ker, 1.0, Statistics::Quantum).unwrap();
        assert!(op.symmetry_defect() < 1e-15);
        let ones = Array1::from_elem(op.dim(), 1.0);
        let norm = op.norm_estimate(30);
        assert!(op.apply(&ones).iter().all(|x| x.abs() < 1e-13 * norm));
        let w = op.restrict(m.omega());
        let r = op.apply(&w);
        assert!(r.iter().all(|x| x.abs() < 5.0 * eta * norm), "{}", r.iter().fold(0.0f64, |a, b| a.max(b.abs())));
        let zero = IsotopeKernel::build(m, 0.0, eta, 5.0).unwrap();
        let z = assemble_li(m, &zero, 1.0, Statistics::Quantum).unwrap();
        assert!(z.apply(&ones).iter().all(|&x| x == 0.0));
    }
}
