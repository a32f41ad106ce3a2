use crate::oracle::{direct_collision, nearest, next_nearest, slope};
use crate::Outcome;
use phonon_kinetics::lattice::{resonance_scan, tau_direct};
use phonon_kinetics::linear::{
    assemble_l, assemble_li, conductivity, invariant_nullspace, isotope_conductivity_closed_form, Stoichiometry,
};
use phonon_kinetics::modes::equilibrium_weight;
use phonon_kinetics::{
    build_triples, collide, collide_classical, collide_quantum, BrillouinGrid, CollisionParams64, DispersionModel64,
    IsotopeKernel64, Kernel, ModeSet64, Occupation64, PrefactorKind, Statistics, TripleList64,
};
use phonon_kinetics::solver::{beta_star, evolve_homogeneous, fit_beta, jacobian_radius, EvolveOptions};
use phonon_kinetics::energy;
use phonon_kinetics::jump::{expected_sampling_tv, isotope_grid_solution, jump_checkpoints, total_variation, JumpEnsemble};
use phonon_kinetics::solver::{evolve_slab, slab_profile, SlabField, SlabOptions};
use phonon_kinetics::lattice::density_of_states;
use phonon_kinetics::micro::{
    anharmonic_drift, disorder_decay, drift_prediction, energy_order, integrate_anharmonic, mode_occupation, pearson,
    predicted_decay_rate, sample_gaussian_field, Lattice,
};
use phonon_kinetics::turbulence::{kz_exponent_scan, KzScan};
use rand::Rng;
use std::f64::consts::PI;

const CUTOFF: f64 = 5.0;

fn nnn(omega0: f64, n: usize) -> ModeSet64 {
    ModeSet64::new(DispersionModel64::NextNearestPaper { omega0 }, BrillouinGrid::new(n).unwrap()).unwrap()
}

fn default_eta(m: &ModeSet64) -> f64 {
    m.model().default_delta_width(&m.grid())
}

fn triples(m: &ModeSet64, eta: f64) -> TripleList64 {
    build_triples(m, eta, CUTOFF, PrefactorKind::OnSite).unwrap()
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Equilibria are fixed points of the raw kernels up to a mollifier error
/// that shrinks with η.
pub fn criterion_01() -> Outcome {
    let m = nnn(1.0, 16);
    let eta = default_eta(&m);
    let gamma = 1.0;
    let beta = 1.0;
    let p = CollisionParams64::from_gamma(gamma, 1.0).unwrap();
    let w_min = m.active_indices().iter().map(|&i| m.omega()[i]).fold(f64::INFINITY, f64::min);
    let bound = 1e-2 * gamma / (beta * beta) * w_min.powi(-3);
    let half = triples(&m, eta / 2.0);
    let full = triples(&m, eta);
    let mut pass = true;
    let mut parts = Vec::new();
    let mut notes = Vec::new();
    for s in [Statistics::Classical, Statistics::Quantum] {
        let weq = m.equilibrium(beta, s).unwrap();
        let raw = |t: &TripleList64| match s {
            Statistics::Classical => sup(&collide_classical(&weq, t, &p).unwrap()),
            Statistics::Quantum => sup(&collide_quantum(&weq, t, &p).unwrap()),
        };
        let (a, b) = (raw(&full), raw(&half));
        let ratio = b / a;
        pass &= a <= bound && (0.4..=0.8).contains(&ratio);
        parts.push(format!("{s:?}: |C|={a:.3e} (bound {bound:.1e}), ratio(eta/2)={ratio:.3}"));
        let cons = sup(&collide(&weq, &full, &p, Kernel::Conservative).unwrap());
        notes.push(format!("{s:?} conservative kernel at W_beta: |C'| = {cons:.1e}"));
    }
    let mut o = Outcome::new(pass, format!("eta={eta:.3}; {}", parts.join("; ")));
    o.notes = notes;
    o
}

/// Direct double-loop summation against the triple-list kernels at N=4.
pub fn criterion_12() -> Outcome {
    let n = 4;
    let m = nnn(1.0, n);
    let eta = default_eta(&m);
    let t = triples(&m, eta);
    let p = CollisionParams64::from_gamma(0.7, 1.0).unwrap();
    let mut r = phonon_kinetics::rng::stream(12, 0);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (s, quantum) in [(Statistics::Classical, false), (Statistics::Quantum, true)] {
        for trial in 0..3 {
            let v: Vec<f64> = (0..m.len()).map(|_| 0.1 + 2.0 * r.random::<f64>()).collect();
            let w = Occupation64::new(m.grid(), v.clone(), s).unwrap();
            let lib = if quantum { collide_quantum(&w, &t, &p) } else { collide_classical(&w, &t, &p) }.unwrap();
            let reference = direct_collision(|k| next_nearest(1.0, k), n, eta, CUTOFF, p.gamma, &v, quantum);
            let err = lib.iter().zip(&reference).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())) / sup(&reference);
            worst = worst.max(err);
            if trial == 0 {
                parts.push(format!("{s:?} max |C| {:.3e}", sup(&reference)));
            }
        }
    }
    Outcome::new(worst <= 1e-12, format!("max relative deviation {worst:.2e} over 6 random fields ({})", parts.join(", ")))
}

/// Resonance-defect bound of the nearest-neighbor lattice and negative
/// defects of the next-nearest one.
pub fn criterion_04() -> Outcome {
    let samples = 1_000_000;
    let mut pass = true;
    let mut parts = Vec::new();
    let mut notes = Vec::new();
    for (i, w0) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let model = DispersionModel64::NearestNeighbor { omega0: w0 };
        let rep = resonance_scan(&model, samples, 40 + i as u64, None).unwrap();
        // the same scan in closed form, on an unrelated stream
        let mut r = phonon_kinetics::rng::stream(4, i as u64);
        let mut direct = f64::INFINITY;
        for _ in 0..samples {
            let k: [f64; 3] = [r.random(), r.random(), r.random()];
            let q: [f64; 3] = [r.random(), r.random(), r.random()];
            let kq = [0, 1, 2].map(|d| k[d] + q[d]);
            direct = direct.min(nearest(w0, k) + nearest(w0, q) - nearest(w0, kq));
        }
        pass &= rep.min_defect >= w0 / 2.0 && direct >= w0 / 2.0;
        parts.push(format!("omega0={w0}: min E={:.4} (bound {})", rep.min_defect, w0 / 2.0));
        notes.push(format!("closed-form scan omega0={w0}: min E={direct:.4}"));
    }
    let rep = resonance_scan(&DispersionModel64::NextNearestPaper { omega0: 1.0 }, samples, 43, None).unwrap();
    pass &= rep.fraction_negative > 0.0;
    parts.push(format!("next-nearest fraction_negative={:.4}", rep.fraction_negative));
    let mut o = Outcome::new(pass, parts.join("; "));
    o.notes = notes;
    o
}

/// Symmetry, semidefiniteness, the energy null vector and the derivative
/// of the conservative kernel.
pub fn criterion_05() -> Outcome {
    let m = nnn(1.0, 12);
    let eta = default_eta(&m);
    let t = triples(&m, eta);
    let p = CollisionParams64::from_gamma(1.0, 1.0).unwrap();
    let beta = 1.0;
    let s = Statistics::Quantum;
    let op = assemble_l(&t, p.gamma, beta, s, Stoichiometry::Projected).unwrap();
    let eig = op.eigenvalues().unwrap();
    let norm = eig.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let sym = op.symmetry_defect() / norm;
    let min_eig = eig[0] / norm;
    let w = op.restrict(m.omega());
    let lw = op.apply(&w);
    let null = lw.dot(&lw).sqrt() / (norm * w.dot(&w).sqrt());
    let (fd, fd_raw, raw_null) = {
        let mut r = phonon_kinetics::rng::stream(5, 0);
        let f: Vec<f64> = (0..m.len()).map(|_| r.random::<f64>() - 0.5).collect();
        let dev = |kernel: Kernel, stoich: Stoichiometry| {
            let o = assemble_l(&t, p.gamma, beta, s, stoich).unwrap();
            let weq = m.equilibrium(beta, s).unwrap().into_values();
            let eps = 1e-6;
            let pert: Vec<f64> = (0..m.len())
                .map(|i| if m.is_active(i) { weq[i] + eps * equilibrium_weight(beta, m.omega()[i], s) * f[i] } else { 0.0 })
                .collect();
            let c1 = collide(&Occupation64::new(m.grid(), pert, s).unwrap(), &t, &p, kernel).unwrap();
            let c0 = collide(&Occupation64::new(m.grid(), weq, s).unwrap(), &t, &p, kernel).unwrap();
            let lf = o.extend(&o.apply(&o.restrict(&f)));
            let diff: Vec<f64> = (0..m.len()).map(|i| (c1[i] - c0[i]) / eps + lf[i]).collect();
            let wv = o.restrict(m.omega());
            let lw = o.apply(&wv);
            (sup(&diff) / sup(&lf), lw.dot(&lw).sqrt() / (o.norm_estimate(100) * wv.dot(&wv).sqrt()))
        };
        let (a, _) = dev(Kernel::Conservative, Stoichiometry::Projected);
        let (b, c) = dev(Kernel::Raw, Stoichiometry::Raw);
        (a, b, c)
    };
    let pass = sym <= 1e-12 && min_eig >= -1e-10 && null <= 1e-3 && fd <= 1e-4;
    Outcome::new(
        pass,
        format!(
            "N=12 dim {}: symmetry {sym:.1e}, min eig/|L| {min_eig:.2e}, |L omega| {null:.1e}, finite difference {fd:.1e}",
            op.dim()
        ),
    )
    .note(format!("raw rows: |L omega| {raw_null:.2e}, finite difference against the raw kernel {fd_raw:.2e} (eta={eta:.3})"))
}

/// The null space of the reaction rows is spanned by ω.
pub fn criterion_06() -> Outcome {
    let m = nnn(0.0, 16);
    let t = triples(&m, default_eta(&m));
    let rep = invariant_nullspace(&t, Stoichiometry::Projected).unwrap();
    let pass = rep.null_dimension == 1 && rep.cosine_to_omega >= 0.999 && rep.unconstrained_points.contains(&0);
    let raw = invariant_nullspace(&t, Stoichiometry::Raw).unwrap();
    Outcome::new(
        pass,
        format!(
            "dimension {}, cosine {:.6}, next singular ratio {:.2e}",
            rep.null_dimension,
            rep.cosine_to_omega,
            rep.smallest_singular_ratios.get(1).copied().unwrap_or(f64::NAN)
        ),
    )
    .note(format!(
        "raw rows: dimension {}, cosine {:.5}, smallest singular ratio {:.2e}",
        raw.null_dimension, raw.cosine_to_omega, raw.smallest_singular_ratios[0]
    ))
}

/// Temperature scaling, the isotope relaxation-time closed form and the
/// isotropy of the conductivity tensor.
pub fn criterion_07() -> Outcome {
    let m = nnn(1.0, 10);
    let eta = default_eta(&m);
    let t = triples(&m, eta);
    let gate = invariant_nullspace(&t, Stoichiometry::Projected).unwrap();
    let k = |beta: f64| {
        let op = assemble_l(&t, 1.0, beta, Statistics::Classical, Stoichiometry::Projected).unwrap();
        conductivity(&op, &m, Some(&gate), "three_phonon").unwrap()
    };
    let (a, b) = (k(0.2), k(0.1));
    let (ta, tb) = (5.0 * a.kappa[0][0], 10.0 * b.kappa[0][0]);
    let scaling = (ta - tb).abs() / ta;
    let variance = 0.1;
    let beta = 0.5;
    let ker = IsotopeKernel64::build(&m, variance, eta, CUTOFF).unwrap();
    let op = assemble_li(&m, &ker, beta, Statistics::Quantum).unwrap();
    let iso = conductivity(&op, &m, None, "isotope").unwrap();
    let closed = isotope_conductivity_closed_form(&m, variance, beta, Statistics::Quantum, eta).unwrap();
    let dev = (iso.kappa[0][0] - closed).abs() / closed;
    let off = a.max_off_diagonal_ratio().max(b.max_off_diagonal_ratio()).max(iso.max_off_diagonal_ratio());
    let pass = scaling <= 0.01 && dev <= 0.03 && off <= 0.01;
    Outcome::new(
        pass,
        format!(
            "T*kappa {ta:.5e} vs {tb:.5e} (rel {scaling:.1e}); isotope CG {:.5e} vs closed form {closed:.5e} (rel {dev:.2e}); off-diagonal {off:.1e}",
            iso.kappa[0][0]
        ),
    )
}

fn random_field(m: &ModeSet64, s: Statistics, seed: u64, index: u64) -> Occupation64 {
    let mut r = phonon_kinetics::rng::stream(seed, index);
    let v = (0..m.len()).map(|i| if m.is_active(i) { 0.05 + 2.0 * r.random::<f64>() } else { 0.0 }).collect();
    Occupation64::new(m.grid(), v, s).unwrap()
}

/// Entropy never decreases along the conservative evolution and its
/// production is nonnegative at every logged time.
pub fn criterion_02() -> Outcome {
    let m = nnn(1.0, 8);
    let t = triples(&m, default_eta(&m));
    let p = CollisionParams64::from_gamma(1.0, 1.0).unwrap();
    let opts = EvolveOptions::default();
    let mut worst_drop: f64 = 0.0;
    let mut min_sigma = f64::INFINITY;
    let mut worst_rate: f64 = 0.0;
    let mut logged = 0;
    for s in [Statistics::Classical, Statistics::Quantum] {
        for trial in 0..20 {
            let w0 = random_field(&m, s, 2, trial);
            let rho = jacobian_radius(&w0, &t, &p, Kernel::Conservative, 30);
            // RK4 loses monotonicity near dt ρ = 1 once modes deplete
            let dt = 0.5 / rho;
            let (log, _) = evolve_homogeneous(&w0, &t, &p, 200.0 * dt, dt, &opts).unwrap();
            for i in 1..log.t.len() {
                worst_drop = worst_drop.max(log.entropy[i - 1] - log.entropy[i]);
                // the mean production over a step brackets the entropy increment
                let mean = 0.5 * (log.sigma[i] + log.sigma[i - 1]) * (log.t[i] - log.t[i - 1]);
                let inc = log.entropy[i] - log.entropy[i - 1];
                if mean > 1e-9 * log.entropy[i].abs() {
                    worst_rate = worst_rate.max((inc - mean).abs() / mean);
                }
            }
            min_sigma = log.sigma.iter().fold(min_sigma, |a, &b| a.min(b));
            logged += log.t.len();
        }
    }
    let pass = worst_drop <= 1e-10 && min_sigma >= 0.0;
    Outcome::new(
        pass,
        format!("40 runs, {logged} logged states: largest entropy decrease {worst_drop:.1e}, smallest production {min_sigma:.2e}"),
    )
    .note(format!("trapezoid of the production against the entropy increment (steps above 1e-9 relative): worst relative gap {worst_rate:.1e}"))
}

/// Quantum relaxation to the energy-matched Bose-Einstein state.
pub fn criterion_03() -> Outcome {
    let m = nnn(1.0, 12);
    let t = triples(&m, default_eta(&m));
    let p = CollisionParams64::from_gamma(1.0, 1.0).unwrap();
    let s = Statistics::Quantum;
    let mut r = phonon_kinetics::rng::stream(3, 0);
    let v = m.equilibrium(1.0, s).unwrap().into_values().into_iter().map(|w| w * (1.0 + 0.5 * (2.0 * r.random::<f64>() - 1.0))).collect();
    let mut w = Occupation64::new(m.grid(), v, s).unwrap();
    let beta = beta_star(&m, energy(&w, &m).unwrap(), s).unwrap();
    let rho = jacobian_radius(&w, &t, &p, Kernel::Conservative, 30);
    let dt = 1.5 / rho;
    let opts = EvolveOptions { log_every: usize::MAX, ..Default::default() };
    let mut elapsed = 0.0;
    let mut dist = f64::INFINITY;
    let mut history = Vec::new();
    while dist > 1e-3 && elapsed < 4000.0 * dt {
        let (log, next) = evolve_homogeneous(&w, &t, &p, 50.0 * dt, dt, &opts).unwrap();
        w = next;
        elapsed += 50.0 * dt;
        dist = *log.dist_to_eq.last().unwrap();
        history.push(dist);
    }
    let fitted = fit_beta(&w, &m).unwrap();
    let rel = (fitted - beta).abs() / beta;
    let pass = dist <= 1e-3 && rel <= 1e-3;
    Outcome::new(
        pass,
        format!("t={elapsed:.1}: |W - W_beta*| {dist:.2e}, beta*={beta:.6}, fitted {fitted:.6} (rel {rel:.1e})"),
    )
    .note(format!("distance every 50 steps: {}", history.iter().map(|d| format!("{d:.1e}")).collect::<Vec<_>>().join(" ")))
}

/// Steady slab flux over the interior temperature gradient against the
/// linear-response conductivity at the mean temperature.
pub fn criterion_08() -> Outcome {
    let m = nnn(1.0, 12);
    let t = triples(&m, default_eta(&m));
    let s = Statistics::Classical;
    let p = CollisionParams64::from_gamma(1.0, 1.0).unwrap();
    let op = assemble_l(&t, p.gamma, 1.0, s, Stoichiometry::Projected).unwrap();
    let lr = conductivity(&op, &m, None, "three_phonon").unwrap();
    let kappa = lr.kappa[0][0];
    // ten mean free paths across 32 cells
    let cells = 32;
    let len = 10.0 * lr.mean_free_path;
    let dx = len / cells as f64;
    let walls = (1.05, 0.95);
    let field = SlabField::linear_profile(&m, cells, dx, walls, s).unwrap();
    let rho = jacobian_radius(&m.equilibrium(1.0, s).unwrap(), &t, &p, Kernel::Conservative, 40);
    let v_max = (0..m.len()).map(|i| m.group_velocity(i)[0].abs()).fold(0.0, f64::max);
    let dt = (1.5 / rho).min(0.9 * dx / v_max);
    let steps = 800;
    let opts = SlabOptions { log_every: steps / 4, ..Default::default() };
    let (end, log) = evolve_slab(&field, &t, &p, dt * steps as f64, dt, &opts).unwrap();
    let prof = slab_profile(&end, &m).unwrap();
    let inner = &prof[cells / 4..cells - cells / 4];
    let x: Vec<f64> = inner.iter().map(|c| c.x).collect();
    let y: Vec<f64> = inner.iter().map(|c| c.temperature).collect();
    let gradient = slope(&x, &y);
    let flux = prof.iter().map(|c| c.flux).sum::<f64>() / cells as f64;
    let ratio = -flux / gradient / kappa;
    let spread = |f: &[f64]| {
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        f.iter().fold(0.0f64, |a, b| a.max((b - mean).abs())) / mean
    };
    let history: Vec<String> = log.flux.iter().map(|f| format!("{:.4e}", f.iter().sum::<f64>() / f.len() as f64)).collect();
    Outcome::new(
        (ratio - 1.0).abs() <= 0.15,
        format!(
            "N=12, 32 cells over {:.0} mean free paths: flux/gradient {:.4e} vs kappa {kappa:.4e} (ratio {ratio:.3})",
            len / lr.mean_free_path,
            -flux / gradient
        ),
    )
    .note(format!(
        "wall-to-wall ratio {:.3}; mean flux every {} steps {}; final cell spread {:.1e}",
        flux * len / (walls.0 - walls.1) / kappa,
        steps / 4,
        history.join(" "),
        spread(log.flux.last().unwrap())
    ))
}

struct JumpRun {
    tv: Vec<f64>,
    expected: Vec<f64>,
    reached: usize,
    mle: f64,
    golden: f64,
}

fn jump_run(m: &ModeSet64, eta: f64, particles: usize) -> JumpRun {
    let g = m.grid();
    let variance = 0.1;
    let ker = IsotopeKernel64::build(m, variance, eta, CUTOFF).unwrap();
    let start = g.index([1, 2, 3]);
    let nu = ker.total_rate(start);
    let checkpoints = [0.5 / nu, 1.0 / nu, 3.0 / nu];
    let ens = JumpEnsemble::<f64>::concentrated(particles, start);
    let (_, hist, first) = jump_checkpoints(&ens, m, &ker, &checkpoints, 9).unwrap();
    let nu_max = (0..m.len()).map(|i| ker.total_rate(i)).fold(0.0, f64::max);
    let mut p0 = vec![0.0; m.len()];
    p0[start] = 1.0;
    let grid = isotope_grid_solution(&p0, &ker, &checkpoints, 0.05 / nu_max).unwrap();
    let horizon = checkpoints[2];
    let jumps = first.iter().filter(|t| **t <= horizon).count();
    let exposure: f64 = first.iter().map(|t| t.min(horizon)).sum();
    let w = m.omega()[start];
    JumpRun {
        tv: (0..3).map(|c| total_variation(&hist[c], &grid[c])).collect(),
        expected: (0..3).map(|c| expected_sampling_tv(&grid[c], particles)).collect(),
        reached: grid[2].iter().filter(|&&x| x > 1e-12).count(),
        mle: jumps as f64 / exposure,
        golden: 2.0 * PI * variance * w * w * tau_direct(m.model(), &g, eta, w),
    }
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

/// Jump-process histograms against the grid solution, and the first-jump
/// rate against the golden-rule rate, from mode (1,2,3)/8 at t = (0.5, 1, 3)/ν.
pub fn criterion_09() -> Outcome {
    let m = nnn(1.0, 8);
    let particles = 100_000;
    let limit = 4.0 / (particles as f64).sqrt();
    // A shell width that resolves the degenerate orbit keeps the histogram
    // on few modes; the sampling noise of a wide shell alone exceeds the limit.
    let eta = 0.1;
    let r = jump_run(&m, eta, particles);
    let dev = (r.mle - r.golden).abs() / r.golden;
    let pass = r.tv.iter().all(|&x| x <= limit) && dev <= 0.05;
    let wide = jump_run(&m, default_eta(&m), particles);
    Outcome::new(
        pass,
        format!(
            "N=8, eta={eta}: TV {} (limit {limit:.4}); first-jump rate {:.4} vs golden rule {:.4} (rel {dev:.3})",
            list(&r.tv),
            r.mle,
            r.golden
        ),
    )
    .note(format!("sampling-noise TV expected {}; {} modes reached", list(&r.expected), r.reached))
    .note(format!(
        "default eta={:.3}: TV {}, noise floor {}, {} modes reached; rate {:.4} vs {:.4}",
        default_eta(&m),
        list(&wide.tv),
        list(&wide.expected),
        wide.reached,
        wide.mle,
        wide.golden
    ))
}

/// Zero crossings of the four-wave integral for `W = |k|^{−σ}`.
pub fn criterion_10() -> Outcome {
    let model = DispersionModel64::ContinuumLinear;
    let grid = |lo: f64, hi: f64| -> Vec<f64> {
        let n = ((hi - lo) / 0.025).round() as usize;
        (0..=n).map(|i| lo + 0.025 * i as f64).collect()
    };
    let near = |s: &KzScan<f64>, target: f64| s.crossings.iter().any(|c| (c.sigma - target).abs() <= 0.05);
    let show = |s: &KzScan<f64>| {
        s.crossings.iter().map(|c| format!("{:.3}+-{:.3}", c.sigma, c.uncertainty)).collect::<Vec<_>>().join(", ")
    };
    let main = kz_exponent_scan(&model, &grid(1.05, 2.3), (1.0, 1e2), 2_000_000, 10).unwrap();
    let [r0, r1] = main.equilibrium_residual;
    let pass = near(&main, 4.0 / 3.0) && near(&main, 5.0 / 3.0) && r0 <= 1e-12 && r1 <= 1e-12;
    let mut sigmas = grid(1.2, 1.45);
    sigmas.extend(grid(1.55, 1.8));
    let wide = kz_exponent_scan(&model, &sigmas, (1.0, 1e8), 16_000_000, 10).unwrap();
    Outcome::new(
        pass,
        format!(
            "band ratio 1e2: crossings [{}], flagged {}; bracket residual at sigma 0, 1: {r0:.1e}, {r1:.1e}",
            show(&main),
            main.flagged.iter().filter(|f| **f).count()
        ),
    )
    .note(format!(
        "band ratio 1e8: crossings [{}] (near 4/3: {}, near 5/3: {})",
        show(&wide),
        near(&wide, 4.0 / 3.0),
        near(&wide, 5.0 / 3.0)
    ))
}

/// Harmonic invariance, Verlet energy order, disorder decay and the
/// anharmonic drift of a Gaussian ensemble.
pub fn criterion_11() -> Outcome {
    let mut parts = Vec::new();
    let mut notes = Vec::new();
    let mut pass = true;

    let lat = Lattice::new(DispersionModel64::NextNearestPaper { omega0: 1.0 }, 8).unwrap();
    let dt = 0.1 / lat.omega_max();
    let w: Vec<f64> = lat.omega().iter().map(|w| 1.0 / w).collect();
    let mut s = sample_gaussian_field(&lat, &w, 1, 0.01, 11).unwrap().remove(0);
    let before = mode_occupation(&lat, &s, Some(dt)).unwrap();
    integrate_anharmonic(&lat, &mut s, 0.0, 0.01, dt, 5000).unwrap();
    let after = mode_occupation(&lat, &s, Some(dt)).unwrap();
    let inv = after.iter().zip(&before).fold(0.0f64, |a, (x, y)| a.max((x - y).abs() / y));
    pass &= inv <= 1e-8;
    parts.push(format!("lambda=0 mode change {inv:.1e}"));

    let lat4 = Lattice::new(DispersionModel64::NextNearestPaper { omega0: 1.0 }, 6).unwrap();
    let w4: Vec<f64> = lat4.omega().iter().map(|w| 1.0 / w).collect();
    let s4 = sample_gaussian_field(&lat4, &w4, 1, 0.1, 5).unwrap().remove(0);
    let (order, coarse, fine) = energy_order(&lat4, &s4, 1.0, 0.1, 0.08 / lat4.omega_max(), 2000, 10).unwrap();
    pass &= (order - 2.0).abs() <= 0.2;
    parts.push(format!("energy order {order:.3}"));
    notes.push(format!("Verlet energy error {coarse:.2e} at dt, {fine:.2e} at dt/2"));

    let (dpass, dsummary, dnotes) = decay_check();
    pass &= dpass;
    parts.push(dsummary);
    notes.extend(dnotes);

    let (fpass, fsummary, fnotes) = drift_check();
    pass &= fpass;
    parts.push(fsummary);
    notes.extend(fnotes);

    let mut o = Outcome::new(pass, parts.join("; "));
    o.notes = notes;
    o
}

fn decay_check() -> (bool, String, Vec<String>) {
    let model = DispersionModel64::NearestNeighbor { omega0: 1.0 };
    let lat = Lattice::new(model.clone(), 16).unwrap();
    let g = lat.grid();
    let (c0, eps): (f64, f64) = (1.0, 0.01);
    let dt = 0.09 / (lat.omega_max() * (1.0 + eps.sqrt() * c0));
    let dos = density_of_states(&model, &BrillouinGrid::new(96).unwrap(), 0.01).unwrap();
    let mut pass = true;
    let mut devs = Vec::new();
    let mut notes = Vec::new();
    for (j, c) in [[4, 4, 2], [6, 3, 2], [5, 3, 0], [3, 2, 1]].into_iter().enumerate() {
        let k = g.index(c);
        let rate = predicted_decay_rate(&dos, lat.omega()[k], c0, eps);
        let every = ((0.025 / rate) / dt).ceil() as usize;
        let records = ((1.5 / rate) / (every as f64 * dt)).ceil() as usize;
        let run = disorder_decay(&lat, k, c0, eps, 200, dt, every, records, 110 + j as u64).unwrap();
        let fit = run.fit_rate(0.3 / rate, 1.5 / rate).unwrap();
        let dev = (fit - rate).abs() / rate;
        let line = format!("k={c:?} omega={:.3}: fitted {fit:.4e} vs {rate:.4e} (rel {dev:.3})", run.omega);
        if j < 3 {
            pass &= dev <= 0.2;
            devs.push(format!("{dev:.3}"));
            notes.push(format!("decay {line}, energy drift {:.1e}", run.energy_drift));
        } else {
            notes.push(format!("decay diagnostic {line}"));
        }
    }
    (pass, format!("decay deviations {}", devs.join(", ")), notes)
}

fn drift_check() -> (bool, String, Vec<String>) {
    let model = DispersionModel64::NextNearestPaper { omega0: 1.0 };
    let lat = Lattice::new(model.clone(), 16).unwrap();
    let g = lat.grid();
    let (lambda, eps) = (1.0, 0.01);
    let dt = 0.1 / lat.omega_max();
    let steps = (40.0 / dt).round() as usize;
    let w: Vec<f64> = (0..g.len())
        .map(|i| {
            let k: [f64; 3] = g.k(i);
            10.0 * (1.0 + 0.5 * (2.0 * PI * k[0]).cos()) / lat.omega()[i]
        })
        .collect();
    let d = anharmonic_drift(&lat, &w, lambda, eps, 300, dt, steps, 111).unwrap();
    let pred = drift_prediction(&lat, &w, lambda, eps, dt, steps).unwrap();
    // k = 0 carries the static frequency shift of the cubic term, not a collision
    let sel: Vec<usize> = (1..g.len()).filter(|&i| pred[i].abs() > 3.0 * d.stderr[i]).collect();
    let x: Vec<f64> = sel.iter().map(|&i| pred[i]).collect();
    let y: Vec<f64> = sel.iter().map(|&i| d.rate[i]).collect();
    let r = pearson(&x, &y);
    let fit = slope(&x, &y);
    let mut notes = vec![format!("drift: {} resolved modes of {}, least-squares slope {fit:.3}", sel.len(), g.len() - 1)];
    let modes = ModeSet64::new(model, g).unwrap();
    let t = build_triples(&modes, 0.5, CUTOFF, PrefactorKind::OnSite).unwrap();
    let occ = Occupation64::new(g, w.clone(), Statistics::Classical).unwrap();
    let c = collide_classical(&occ, &t, &CollisionParams64::from_lambda(lambda, 1.0)).unwrap();
    let all: Vec<usize> = (1..g.len()).collect();
    let gx: Vec<f64> = all.iter().map(|&i| eps * c[i]).collect();
    let gy: Vec<f64> = all.iter().map(|&i| d.rate[i]).collect();
    notes.push(format!("drift against the Gaussian eta=0.5 kernel over all modes: correlation {:.3}", pearson(&gx, &gy)));
    (r >= 0.8, format!("drift correlation {r:.3}"), notes)
}
