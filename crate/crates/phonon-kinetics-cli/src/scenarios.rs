use crate::config::{Config, Initial, MdMode, Scenario, TurbulenceMode};
use crate::output::{f, Outputs};
use anyhow::{bail, Context, Result};
use phonon_kinetics::jump::{expected_sampling_tv, isotope_grid_solution, jump_checkpoints, total_variation, JumpEnsemble};
use phonon_kinetics::lattice::{density_of_states, morse_diagnostic, resonance_scan, tau_direct};
use phonon_kinetics::linear::{
    assemble_l, assemble_li, conductivity, invariant_nullspace, isotope_conductivity_closed_form,
    CONDUCTIVITY_CSV_HEADER,
};
use phonon_kinetics::micro::{
    anharmonic_drift, disorder_decay, drift_prediction, energy_error, estimate_occupation, integrate_anharmonic,
    pearson, predicted_decay_rate, sample_gaussian_field, Lattice,
};
use phonon_kinetics::solver::{evolve_homogeneous, evolve_slab, fit_beta, slab_profile, EvolveOptions, SlabField, SlabOptions};
use phonon_kinetics::turbulence::{
    evolve_forced, fourwave_reduced, kz_exponent_scan, log_grid, log_log_slope, ForcedOptions, TurbulenceSpectrum,
};
use phonon_kinetics::{
    build_triples, BrillouinGrid, IsotopeKernel, ModeSet64, Occupation, PrefactorKind, TripleList64,
};
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use std::f64::consts::PI;

fn modes(cfg: &Config) -> Result<ModeSet64> {
    let model = cfg.model.clone().context("missing model")?;
    let n = cfg.n.context("missing n")?;
    Ok(ModeSet64::new(model, BrillouinGrid::new(n)?)?)
}

fn eta(cfg: &Config, m: &ModeSet64) -> f64 {
    cfg.eta.unwrap_or_else(|| m.model().default_delta_width(&m.grid()))
}

fn triples(cfg: &Config, m: &ModeSet64) -> Result<TripleList64> {
    let prefactor = cfg.prefactor.unwrap_or(PrefactorKind::OnSite);
    let eta = eta(cfg, m);
    Ok(match &cfg.triple_cache {
        Some(p) => TripleList64::load(p, m, eta, cfg.cutoff, prefactor)?,
        None => build_triples(m, eta, cfg.cutoff, prefactor)?,
    })
}

fn k_cols(grid: &BrillouinGrid, i: usize) -> [String; 3] {
    let k: [f64; 3] = grid.k(i);
    [k[0].to_string(), k[1].to_string(), k[2].to_string()]
}

/// Runs one scenario, buffering its artifacts; returns the summary.
pub fn run(s: Scenario, cfg: &Config, seed: u64, out: &mut Outputs) -> Result<Value> {
    match s {
        Scenario::Dispersion => dispersion(cfg, out),
        Scenario::Resonance => resonance(cfg, seed, out),
        Scenario::Relax => relax(cfg, seed, out),
        Scenario::Slab => slab(cfg, out),
        Scenario::Conductivity => kappa(cfg, out),
        Scenario::IsotopeMc => isotope_mc(cfg, seed, out),
        Scenario::Turbulence => turbulence(cfg, seed, out),
        Scenario::Md => md(cfg, seed, out),
    }
}

fn dispersion(cfg: &Config, out: &mut Outputs) -> Result<Value> {
    let m = modes(cfg)?;
    let g = m.grid();
    let rows = (0..g.len()).map(|i| {
        let [a, b, c] = k_cols(&g, i);
        let v = m.group_velocity(i);
        vec![a, b, c, f(m.omega()[i]), f(v[0]), f(v[1]), f(v[2])]
    });
    out.table("dispersion.csv", &["k1", "k2", "k3", "omega", "v1", "v2", "v3"], rows)?;
    let eta = eta(cfg, &m);
    let dos = density_of_states(m.model(), &g, eta)?;
    out.table("dos.csv", &["omega", "tau"], dos.omega.iter().zip(&dos.tau).map(|(w, t)| vec![f(*w), f(*t)]))?;
    let morse = match morse_diagnostic(m.model(), &g) {
        Ok(r) => {
            out.table(
                "critical_points.csv",
                &["k1", "k2", "k3", "hessian_det", "index", "degenerate"],
                r.critical_points.iter().map(|c| {
                    vec![f(c.k[0]), f(c.k[1]), f(c.k[2]), f(c.hessian_det), c.index.to_string(), c.degenerate.to_string()]
                }),
            )?;
            json!({ "critical_points": r.critical_count(), "degenerate": r.degenerate_count() })
        }
        Err(phonon_kinetics::Error::InvalidParameter(why)) => json!({ "skipped": why }),
        Err(e) => return Err(e.into()),
    };
    let (lo, hi) = m.omega().iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    Ok(json!({
        "n": g.n(), "eta": eta, "omega_min": lo, "omega_max": hi,
        "dos_integral": dos.integral(), "dos_undersmoothed": dos.undersmoothed, "morse": morse,
    }))
}

fn resonance(cfg: &Config, seed: u64, out: &mut Outputs) -> Result<Value> {
    let model = cfg.model.as_ref().context("missing model")?;
    let samples = cfg.resonance.as_ref().context("missing resonance section")?.samples;
    let r = resonance_scan(model, samples, seed, cfg.eta)?;
    out.table(
        "resonance.csv",
        &["min_defect", "fraction_negative", "resonance_measure", "e_max_estimate", "delta_width", "samples"],
        [vec![
            f(r.min_defect),
            f(r.fraction_negative),
            f(r.resonance_measure),
            f(r.e_max_estimate),
            f(r.delta_width),
            r.samples.to_string(),
        ]],
    )?;
    Ok(serde_json::to_value(&r)?)
}

fn relax(cfg: &Config, seed: u64, out: &mut Outputs) -> Result<Value> {
    let m = modes(cfg)?;
    let g = m.grid();
    let sec = cfg.relax.as_ref().context("missing relax section")?;
    let stats = cfg.statistics();
    let params = cfg.collision_params()?.context("missing coupling")?;
    let time = cfg.time.context("missing time")?;
    let tr = triples(cfg, &m)?;
    let w0 = match sec.initial {
        Initial::Equilibrium { beta } => m.equilibrium(beta, stats)?,
        Initial::Perturbed { beta, amplitude } => {
            let mut r = phonon_kinetics::rng::stream(seed, 0);
            let v = m
                .equilibrium(beta, stats)?
                .into_values()
                .into_iter()
                .map(|w| w * (1.0 + amplitude * (2.0 * r.random::<f64>() - 1.0)))
                .collect();
            Occupation::new(g, v, stats)?
        }
    };
    let n = g.n();
    let track: Vec<usize> = match &sec.track {
        Some(t) => t.iter().map(|c| g.index(*c)).collect(),
        None => {
            let mut v: Vec<usize> =
                [[1, 0, 0], [1, 1, 0], [1, 1, 1], [n / 2, n / 2, n / 2]].iter().map(|c| g.index(*c)).collect();
            v.dedup();
            v
        }
    };
    let segment = time.dt * time.log_every as f64;
    let count = (time.t_end / segment).ceil().max(1.0) as usize;
    let opts = EvolveOptions { scheme: sec.scheme, log_every: usize::MAX, ..Default::default() };
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut occ_rows: Vec<Vec<String>> = Vec::new();
    let mut w = w0;
    let mut halvings = 0;
    let mut beta_star = f64::NAN;
    let mut t0 = 0.0;
    let snap = |t: f64, w: &Occupation<f64>| -> Vec<String> {
        std::iter::once(f(t)).chain(track.iter().map(|&i| f(w.values()[i]))).collect()
    };
    occ_rows.push(snap(0.0, &w));
    for s in 0..count {
        let len = if s + 1 == count { time.t_end - t0 } else { segment };
        let (log, next) = evolve_homogeneous(&w, &tr, &params, len.max(0.0), time.dt, &opts)?;
        beta_star = log.beta_star;
        halvings += log.halvings;
        let first = if s == 0 { 0 } else { 1 };
        for i in first..log.t.len() {
            rows.push(vec![
                f(t0 + log.t[i]),
                f(log.energy[i]),
                f(log.entropy[i]),
                f(log.sigma[i]),
                f(log.dist_to_eq[i]),
            ]);
        }
        t0 += len;
        w = next;
        occ_rows.push(snap(t0, &w));
    }
    out.table("trajectory.csv", &["t", "energy", "entropy", "sigma", "dist_to_eq"], rows.clone())?;
    let mut header = vec!["t".to_string()];
    header.extend(track.iter().map(|&i| {
        let c = g.coords(i);
        format!("W_{}_{}_{}", c[0], c[1], c[2])
    }));
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    out.table("occupations.csv", &hdr, occ_rows)?;
    out.csv("final_occupation.csv", w.to_csv());
    let fitted = fit_beta(&w, &m).ok();
    Ok(json!({
        "triples": tr.len(), "eta": tr.delta_width(), "beta_star": beta_star, "fitted_beta": fitted,
        "final_dist_to_eq": rows.last().map(|r| r[4].clone()), "halvings": halvings,
    }))
}

fn slab(cfg: &Config, out: &mut Outputs) -> Result<Value> {
    let m = modes(cfg)?;
    let sec = cfg.slab.as_ref().context("missing slab section")?;
    let params = cfg.collision_params()?.context("missing coupling")?;
    let time = cfg.time.context("missing time")?;
    let tr = triples(cfg, &m)?;
    let dx = sec.length / sec.cells as f64;
    let field = SlabField::linear_profile(&m, sec.cells, dx, (sec.walls[0], sec.walls[1]), cfg.statistics())?;
    let opts = SlabOptions { kernel: sec.kernel, log_every: time.log_every, ..Default::default() };
    let (end, log) = evolve_slab(&field, &tr, &params, time.t_end, time.dt, &opts)?;
    let profile = slab_profile(&end, &m)?;
    out.table(
        "profile.csv",
        &["cell", "x", "temperature", "flux"],
        profile.iter().map(|p| vec![p.cell.to_string(), f(p.x), f(p.temperature), f(p.flux)]),
    )?;
    out.table(
        "flux_history.csv",
        &["t", "flux_mean", "flux_min", "flux_max"],
        log.t.iter().zip(&log.flux).map(|(t, fl)| {
            let mean = fl.iter().sum::<f64>() / fl.len() as f64;
            let lo = fl.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = fl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            vec![f(*t), f(mean), f(lo), f(hi)]
        }),
    )?;
    let flux = profile.iter().map(|p| p.flux).sum::<f64>() / profile.len() as f64;
    // interior gradient from the middle half of the slab
    let inner: Vec<_> = profile[profile.len() / 4..profile.len() - profile.len() / 4].to_vec();
    let nx = inner.len() as f64;
    let mx = inner.iter().map(|p| p.x).sum::<f64>() / nx;
    let mt = inner.iter().map(|p| p.temperature).sum::<f64>() / nx;
    let slope = inner.iter().map(|p| (p.x - mx) * (p.temperature - mt)).sum::<f64>()
        / inner.iter().map(|p| (p.x - mx).powi(2)).sum::<f64>();
    Ok(json!({
        "triples": tr.len(), "mean_flux": flux, "interior_gradient": slope,
        "kappa_interior": -flux / slope,
        "kappa_walls": flux * sec.length / (sec.walls[0] - sec.walls[1]),
    }))
}

fn kappa(cfg: &Config, out: &mut Outputs) -> Result<Value> {
    let m = modes(cfg)?;
    let stats = cfg.statistics();
    let sec = cfg.conductivity.clone().unwrap_or_default();
    let gamma = cfg.collision_params()?.map_or(0.0, |p| p.gamma);
    let variance = cfg.variance.unwrap_or(0.0);
    let eta = eta(cfg, &m);
    let tr = if gamma > 0.0 { Some(triples(cfg, &m)?) } else { None };
    let gate = match (&tr, sec.ergodicity_gate) {
        (Some(t), true) => Some(invariant_nullspace(t, sec.stoichiometry)?),
        _ => None,
    };
    let iso = if variance > 0.0 { Some(IsotopeKernel::build(&m, variance, eta, cfg.cutoff)?) } else { None };
    let component = match (gamma > 0.0, variance > 0.0) {
        (true, true) => "combined",
        (true, false) => "three_phonon",
        _ => "isotope",
    };
    let temps = cfg.temperatures.clone().context("missing temperatures")?;
    let mut csv = String::from(CONDUCTIVITY_CSV_HEADER);
    let mut rows = Vec::new();
    for &t in &temps {
        let beta = 1.0 / t;
        let l = tr.as_ref().map(|x| assemble_l(x, gamma, beta, stats, sec.stoichiometry)).transpose()?;
        let li = iso.as_ref().map(|k| assemble_li(&m, k, beta, stats)).transpose()?;
        let op = match (l, li) {
            (Some(a), Some(b)) => a.add(&b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => bail!("no collision mechanism"),
        };
        let r = conductivity(&op, &m, gate.as_ref(), component)?;
        csv.push_str(&r.csv_row());
        let closed = if gamma == 0.0 {
            Some(isotope_conductivity_closed_form(&m, variance, beta, stats, eta)?)
        } else {
            None
        };
        rows.push(json!({
            "T": t, "kappa11_times_T": r.kappa[0][0] * t, "off_diagonal_ratio": r.max_off_diagonal_ratio(),
            "cg_iterations": r.cg_iterations, "relative_residual": r.relative_residual,
            "mean_free_path": r.mean_free_path, "closed_form": closed,
        }));
    }
    out.csv("conductivity.csv", csv);
    Ok(json!({
        "eta": eta, "component": component,
        "null_dimension": gate.as_ref().map(|g| g.null_dimension),
        "cosine_to_omega": gate.as_ref().map(|g| g.cosine_to_omega),
        "rows": rows,
    }))
}

fn isotope_mc(cfg: &Config, seed: u64, out: &mut Outputs) -> Result<Value> {
    let m = modes(cfg)?;
    let g = m.grid();
    let sec = cfg.isotope_mc.as_ref().context("missing isotope_mc section")?;
    let variance = cfg.variance.context("missing variance")?;
    let eta = eta(cfg, &m);
    let kernel = IsotopeKernel::build(&m, variance, eta, cfg.cutoff)?;
    let start = g.index(sec.start);
    if !m.is_active(start) {
        bail!(phonon_kinetics::Error::InvalidParameter("start mode is inactive".into()));
    }
    let ens = JumpEnsemble::<f64>::concentrated(sec.particles, start);
    let (_, hist, first) = jump_checkpoints(&ens, &m, &kernel, &sec.checkpoints, seed)?;
    let nu_max = (0..m.len()).map(|i| kernel.total_rate(i)).fold(0.0, f64::max);
    let grid_dt = sec.grid_dt.unwrap_or(if nu_max > 0.0 { 0.2 / nu_max } else { 0.01 });
    let mut p0 = vec![0.0; m.len()];
    p0[start] = 1.0;
    let grid_p = isotope_grid_solution(&p0, &kernel, &sec.checkpoints, grid_dt)?;
    let mut rows = Vec::new();
    let mut tv = Vec::new();
    for (c, &t) in sec.checkpoints.iter().enumerate() {
        for i in 0..m.len() {
            if hist[c][i] > 0 || grid_p[c][i] > 0.0 {
                let [a, b, kk] = k_cols(&g, i);
                rows.push(vec![f(t), a, b, kk, f(hist[c][i] as f64 / sec.particles as f64), f(grid_p[c][i])]);
            }
        }
        tv.push(vec![f(t), f(total_variation(&hist[c], &grid_p[c])), f(expected_sampling_tv(&grid_p[c], sec.particles))]);
    }
    out.table("histogram.csv", &["t", "k1", "k2", "k3", "mc_fraction", "grid_p"], rows)?;
    out.table("tv.csv", &["t", "tv", "expected_tv"], tv)?;
    // censored exponential MLE of the first-jump rate
    let horizon = *sec.checkpoints.last().expect("validated nonempty");
    let jumps = first.iter().filter(|t| **t <= horizon).count();
    let exposure: f64 = first.iter().map(|t| t.min(horizon)).sum();
    let w = m.omega()[start];
    Ok(json!({
        "eta": eta, "start_omega": w, "kernel_rate": kernel.total_rate(start),
        "golden_rule_rate": 2.0 * PI * variance * w * w * tau_direct(m.model(), &g, eta, w),
        "first_jump_rate_mle": jumps as f64 / exposure, "jumped": jumps,
    }))
}

fn turbulence(cfg: &Config, seed: u64, out: &mut Outputs) -> Result<Value> {
    let model = cfg.model.as_ref().context("missing model")?;
    let sec = cfg.turbulence.as_ref().context("missing turbulence section")?;
    let lambda = cfg.lambda.unwrap_or(1.0);
    let band = (sec.band[0], sec.band[1]);
    match sec.mode {
        TurbulenceMode::Scan => {
            let sigmas = sec.sigmas.clone().context("missing sigmas")?;
            let scan = kz_exponent_scan(model, &sigmas, band, sec.samples, seed)?;
            out.csv("kz_scan.csv", scan.to_csv());
            out.table(
                "crossings.csv",
                &["lo", "hi", "sigma", "uncertainty"],
                scan.crossings.iter().map(|c| vec![f(c.lo), f(c.hi), f(c.sigma), f(c.uncertainty)]),
            )?;
            Ok(json!({
                "k": scan.k, "band_ratio": scan.band_ratio, "samples": scan.samples,
                "crossings": scan.crossings.iter().map(|c| c.sigma).collect::<Vec<_>>(),
                "flagged": scan.flagged.iter().filter(|x| **x).count(),
                "equilibrium_residual": scan.equilibrium_residual,
            }))
        }
        TurbulenceMode::Collide => {
            let bins = sec.bins.context("missing bins")?;
            let spec = TurbulenceSpectrum::power_law(band.0, band.1, bins, sec.sigma.context("missing sigma")?)?;
            let est = fourwave_reduced(&spec, model, lambda, sec.samples, seed)?;
            out.csv("collision.csv", est.to_csv());
            Ok(json!({
                "number_sum": est.number_sum, "number_stderr": est.number_stderr,
                "energy_sum": est.energy_sum, "energy_stderr": est.energy_stderr,
            }))
        }
        TurbulenceMode::Forced => {
            let bins = sec.bins.context("missing bins")?;
            let fo = sec.forcing.as_ref().context("missing forcing")?;
            let time = cfg.time.context("missing time")?;
            let k = log_grid(band.0, band.1, bins)?;
            let w = k.iter().map(|&x| fo.amplitude * x.powf(-fo.exponent)).collect();
            let gamma = k
                .iter()
                .map(|&x| {
                    if x < fo.source_below {
                        fo.source_rate
                    } else if x > fo.sink_above {
                        -(x / fo.sink_above).powf(fo.sink_power)
                    } else {
                        0.0
                    }
                })
                .collect();
            let spec = TurbulenceSpectrum::new(band.0, band.1, w, gamma)?;
            let opts = ForcedOptions {
                lambda,
                samples: sec.samples,
                seed,
                log_every: time.log_every,
                snapshot_every: sec.snapshot_every.unwrap_or(100),
                max_halvings: 20,
            };
            let run = evolve_forced(&spec, model, time.t_end, time.dt, &opts)?;
            out.csv("spectrum.csv", run.spectrum.to_csv(None));
            out.table(
                "collision.csv",
                &["kmag", "dW", "stderr"],
                run.spectrum.k.iter().zip(&run.collision).zip(&run.collision_stderr).map(|((k, c), e)| vec![f(*k), f(*c), f(*e)]),
            )?;
            out.csv("budgets.csv", run.budgets_csv());
            let mut snaps = Vec::new();
            for (t, w) in &run.snapshots {
                for (k, x) in run.spectrum.k.iter().zip(w) {
                    snaps.push(vec![f(*t), f(*k), f(*x)]);
                }
            }
            out.table("snapshots.csv", &["t", "kmag", "W"], snaps)?;
            let slope = log_log_slope(&run.spectrum, fo.source_below * 2.0, fo.sink_above / 2.0).ok();
            Ok(json!({
                "inertial_slope": slope, "forcing_integral": run.forcing_integral(),
                "final_rate": run.final_rate, "halvings": run.halvings,
            }))
        }
    }
}

fn md(cfg: &Config, seed: u64, out: &mut Outputs) -> Result<Value> {
    let model = cfg.model.clone().context("missing model")?;
    let sec = cfg.md.as_ref().context("missing md section")?;
    let lat = Lattice::new(model.clone(), sec.side)?;
    let g = lat.grid();
    let lambda = cfg.lambda.unwrap_or(0.0);
    let target = || -> Vec<f64> {
        let theta = sec.theta.unwrap_or(1.0);
        (0..g.len())
            .map(|i| {
                let k: [f64; 3] = g.k(i);
                theta * (1.0 + sec.modulation * (2.0 * PI * k[0]).cos()) / lat.omega()[i]
            })
            .collect()
    };
    let meta = json!({
        "side": sec.side, "epsilon": sec.epsilon, "lambda": lambda, "dt": sec.dt, "seed": seed,
        "window": sec.dt * sec.steps as f64,
    });
    match sec.mode {
        MdMode::Occupation => {
            let w = target();
            let mut ens = sample_gaussian_field(&lat, &w, sec.ensemble, sec.epsilon, seed)?;
            let drift = energy_error(&lat, &ens[0], lambda, sec.epsilon, sec.dt, sec.steps, sec.record_every)?;
            ens.par_iter_mut()
                .map(|s| integrate_anharmonic(&lat, s, lambda, sec.epsilon, sec.dt, sec.steps))
                .collect::<phonon_kinetics::Result<Vec<()>>>()?;
            let est = estimate_occupation(&lat, &ens, Some(sec.dt))?;
            out.csv("modes.csv", est.to_csv());
            Ok(json!({ "run": meta, "energy_error_member0": drift }))
        }
        MdMode::Drift => {
            let w = target();
            let d = anharmonic_drift(&lat, &w, lambda, sec.epsilon, sec.ensemble, sec.dt, sec.steps, seed)?;
            let pred = drift_prediction(&lat, &w, lambda, sec.epsilon, sec.dt, sec.steps)?;
            out.table(
                "drift.csv",
                &["k1", "k2", "k3", "rate", "stderr", "predicted"],
                (0..g.len()).map(|i| {
                    let [a, b, c] = k_cols(&g, i);
                    vec![a, b, c, f(d.rate[i]), f(d.stderr[i]), f(pred[i])]
                }),
            )?;
            let sel: Vec<usize> = (1..g.len()).filter(|&i| pred[i].abs() > 3.0 * d.stderr[i]).collect();
            let x: Vec<f64> = sel.iter().map(|&i| pred[i]).collect();
            let y: Vec<f64> = sel.iter().map(|&i| d.rate[i]).collect();
            let chi2 = (1..g.len()).map(|i| ((d.rate[i] - pred[i]) / d.stderr[i]).powi(2)).sum::<f64>();
            Ok(json!({
                "run": meta, "selected_modes": sel.len(),
                "pearson": if sel.len() > 2 { Some(pearson(&x, &y)) } else { None },
                "chi2_per_mode": chi2 / (g.len() - 1) as f64,
            }))
        }
        MdMode::Decay => {
            let c0 = sec.c0.context("missing c0")?;
            let k = g.index(sec.excite.context("missing excite")?);
            let records = (sec.steps / sec.record_every).max(1);
            let run = disorder_decay(&lat, k, c0, sec.epsilon, sec.ensemble, sec.dt, sec.record_every, records, seed)?;
            out.csv("decay.csv", run.to_csv());
            let dos = density_of_states(&model, &BrillouinGrid::new(96)?, 0.01)?;
            let gamma = predicted_decay_rate(&dos, run.omega, c0, sec.epsilon);
            let t_last = *run.times.last().expect("records");
            let fit = run.fit_rate(0.3 / gamma, (1.5 / gamma).min(t_last)).ok();
            Ok(json!({
                "run": meta, "omega": run.omega, "predicted_rate": gamma, "fitted_rate": fit,
                "energy_drift": run.energy_drift,
            }))
        }
    }
}
