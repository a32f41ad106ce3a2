//! Scenario configuration: one JSON document, unknown keys rejected.

use anyhow::{bail, Context, Result};
use phonon_kinetics::linear::Stoichiometry;
use phonon_kinetics::solver::Scheme;
use phonon_kinetics::{DispersionModel, Kernel, PrefactorKind, Statistics};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Dispersion,
    Resonance,
    Relax,
    Slab,
    Conductivity,
    IsotopeMc,
    Turbulence,
    Md,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Dispersion => "dispersion",
            Scenario::Resonance => "resonance",
            Scenario::Relax => "relax",
            Scenario::Slab => "slab",
            Scenario::Conductivity => "conductivity",
            Scenario::IsotopeMc => "isotope-mc",
            Scenario::Turbulence => "turbulence",
            Scenario::Md => "md",
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Must match the scenario given on the command line when present.
    pub scenario: Option<Scenario>,
    pub model: Option<DispersionModel<f64>>,
    /// Grid points per axis.
    pub n: Option<usize>,
    pub eta: Option<f64>,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    pub prefactor: Option<PrefactorKind>,
    pub statistics: Option<Statistics>,
    pub beta: Option<f64>,
    pub temperatures: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub variance: Option<f64>,
    pub time: Option<TimeControls>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Existing triple cache to load instead of enumerating.
    pub triple_cache: Option<PathBuf>,
    pub relax: Option<RelaxSection>,
    pub slab: Option<SlabSection>,
    pub conductivity: Option<ConductivitySection>,
    pub resonance: Option<ResonanceSection>,
    pub isotope_mc: Option<IsotopeMcSection>,
    pub turbulence: Option<TurbulenceSection>,
    pub md: Option<MdSection>,
}

fn default_cutoff() -> f64 {
    5.0
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TimeControls {
    pub t_end: f64,
    pub dt: f64,
    #[serde(default = "one")]
    pub log_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Initial {
    Equilibrium { beta: f64 },
    /// `W_β(1 + a u)` with `u` uniform on `[−1, 1]`.
    Perturbed { beta: f64, amplitude: f64 },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxSection {
    #[serde(default)]
    pub scheme: Scheme,
    pub initial: Initial,
    /// Grid coordinates whose occupation is written at every log time.
    pub track: Option<Vec<[usize; 3]>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SlabSection {
    pub walls: [f64; 2],
    pub cells: usize,
    pub length: f64,
    #[serde(default)]
    pub kernel: Kernel,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConductivitySection {
    #[serde(default)]
    pub stoichiometry: Stoichiometry,
    /// Run the collisional-invariant analysis before inverting.
    #[serde(default = "yes")]
    pub ergodicity_gate: bool,
}

fn yes() -> bool {
    true
}

impl Default for ConductivitySection {
    fn default() -> Self {
        Self { stoichiometry: Stoichiometry::default(), ergodicity_gate: true }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ResonanceSection {
    pub samples: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct IsotopeMcSection {
    pub particles: usize,
    pub start: [usize; 3],
    pub checkpoints: Vec<f64>,
    pub grid_dt: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TurbulenceMode {
    /// Zero crossings of the collision integral over power-law exponents.
    Scan,
    /// Collision integral of one power law.
    Collide,
    /// Forced evolution to a flux state.
    Forced,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Forcing {
    /// Growth rate `Γ > 0` below `source_below`.
    pub source_below: f64,
    pub source_rate: f64,
    /// Damping `−(k/sink_above)^sink_power` above `sink_above`.
    pub sink_above: f64,
    pub sink_power: f64,
    /// Initial spectrum `amplitude · k^(−exponent)`.
    pub amplitude: f64,
    pub exponent: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TurbulenceSection {
    pub mode: TurbulenceMode,
    pub band: [f64; 2],
    pub samples: usize,
    pub sigmas: Option<Vec<f64>>,
    pub sigma: Option<f64>,
    pub bins: Option<usize>,
    pub forcing: Option<Forcing>,
    pub snapshot_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MdMode {
    /// Sample a Gaussian ensemble, integrate, estimate the occupation.
    Occupation,
    /// Initial anharmonic drift against the finite-window collision operator.
    Drift,
    /// Single-mode decay under isotope disorder.
    Decay,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MdSection {
    pub mode: MdMode,
    pub side: usize,
    pub epsilon: f64,
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub ensemble: usize,
    /// Target `W = θ(1 + m cos 2πk₁)/ω`.
    pub theta: Option<f64>,
    #[serde(default)]
    pub modulation: f64,
    pub c0: Option<f64>,
    pub excite: Option<[usize; 3]>,
    #[serde(default = "one")]
    pub record_every: usize,
}

pub fn parse(text: &str) -> Result<Config> {
    serde_json::from_str(text).context("malformed configuration")
}

fn need<T: Copy>(v: Option<T>, what: &str, s: Scenario) -> Result<T> {
    v.with_context(|| format!("scenario {} needs `{what}`", s.name()))
}

fn positive(x: f64, what: &str) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        bail!("`{what}` must be positive and finite, got {x}");
    }
    Ok(())
}

impl Config {
    /// Checks everything the scenario reads, before any work is done.
    pub fn validate(&self, s: Scenario) -> Result<()> {
        if let Some(named) = self.scenario {
            if named != s {
                bail!("config is for scenario {} but {} was requested", named.name(), s.name());
            }
        }
        let sections: [(&str, bool, Scenario); 7] = [
            ("relax", self.relax.is_some(), Scenario::Relax),
            ("slab", self.slab.is_some(), Scenario::Slab),
            ("conductivity", self.conductivity.is_some(), Scenario::Conductivity),
            ("resonance", self.resonance.is_some(), Scenario::Resonance),
            ("isotope_mc", self.isotope_mc.is_some(), Scenario::IsotopeMc),
            ("turbulence", self.turbulence.is_some(), Scenario::Turbulence),
            ("md", self.md.is_some(), Scenario::Md),
        ];
        for (name, present, owner) in sections {
            if present && owner != s {
                bail!("section `{name}` is not used by scenario {}", s.name());
            }
        }
        let model = self.model.as_ref().with_context(|| format!("scenario {} needs `model`", s.name()))?;
        model.validate()?;
        if let Some(eta) = self.eta {
            positive(eta, "eta")?;
        }
        if !(self.cutoff >= 3.0) || !self.cutoff.is_finite() {
            bail!("`cutoff` must be at least 3, got {}", self.cutoff);
        }
        if let Some(t) = self.threads {
            if t == 0 {
                bail!("`threads` must be at least 1");
            }
        }
        if let Some(p) = &self.triple_cache {
            if !p.is_file() {
                bail!("triple cache {} does not exist", p.display());
            }
        }
        let lattice_grid = |n: Option<usize>| -> Result<usize> {
            if !model.is_lattice() {
                bail!("scenario {} needs a lattice model", s.name());
            }
            let n = need(n, "n", s)?;
            if n < 2 {
                bail!("`n` must be at least 2, got {n}");
            }
            Ok(n)
        };
        let time = |what: &str| -> Result<TimeControls> {
            let t = need(self.time, what, s)?;
            positive(t.dt, "time.dt")?;
            if !(t.t_end >= 0.0) || !t.t_end.is_finite() {
                bail!("`time.t_end` must be nonnegative");
            }
            if t.log_every == 0 {
                bail!("`time.log_every` must be at least 1");
            }
            Ok(t)
        };
        let coupling = || -> Result<()> {
            match (self.gamma, self.lambda) {
                (Some(_), Some(_)) => bail!("give either `gamma` or `lambda`, not both"),
                (None, None) => bail!("scenario {} needs `gamma` or `lambda`", s.name()),
                (Some(g), None) if !(g >= 0.0) => bail!("`gamma` must be nonnegative"),
                _ => Ok(()),
            }
        };
        match s {
            Scenario::Dispersion => {
                lattice_grid(self.n)?;
            }
            Scenario::Resonance => {
                let r = self.resonance.as_ref().context("scenario resonance needs a `resonance` section")?;
                if r.samples < 1000 {
                    bail!("`resonance.samples` must be at least 1000");
                }
            }
            Scenario::Relax => {
                lattice_grid(self.n)?;
                coupling()?;
                time("time")?;
                let r = self.relax.as_ref().context("scenario relax needs a `relax` section")?;
                match r.initial {
                    Initial::Equilibrium { beta } => positive(beta, "initial.beta")?,
                    Initial::Perturbed { beta, amplitude } => {
                        positive(beta, "initial.beta")?;
                        if !(0.0..1.0).contains(&amplitude) {
                            bail!("`initial.amplitude` must lie in [0, 1)");
                        }
                    }
                }
                let n = self.n.unwrap_or(0);
                if let Some(t) = &r.track {
                    if t.iter().flatten().any(|&c| c >= n) {
                        bail!("tracked coordinates must lie below n = {n}");
                    }
                }
            }
            Scenario::Slab => {
                lattice_grid(self.n)?;
                coupling()?;
                time("time")?;
                let sl = self.slab.as_ref().context("scenario slab needs a `slab` section")?;
                positive(sl.walls[0], "slab.walls")?;
                positive(sl.walls[1], "slab.walls")?;
                positive(sl.length, "slab.length")?;
                if sl.cells < 2 {
                    bail!("`slab.cells` must be at least 2");
                }
            }
            Scenario::Conductivity => {
                lattice_grid(self.n)?;
                let temps = self.temperatures.as_ref().context("scenario conductivity needs `temperatures`")?;
                if temps.is_empty() {
                    bail!("`temperatures` is empty");
                }
                for &t in temps {
                    positive(t, "temperatures")?;
                }
                if self.lambda.is_some() && self.gamma.is_some() {
                    bail!("give either `gamma` or `lambda`, not both");
                }
                let g = self.collision_params()?.map_or(0.0, |p| p.gamma);
                let v = self.variance.unwrap_or(0.0);
                if !(v >= 0.0) || !(g >= 0.0) || (g == 0.0 && v == 0.0) {
                    bail!("conductivity needs a positive `gamma`/`lambda` or `variance`");
                }
            }
            Scenario::IsotopeMc => {
                let n = lattice_grid(self.n)?;
                positive(need(self.variance, "variance", s)?, "variance")?;
                let m = self.isotope_mc.as_ref().context("scenario isotope-mc needs an `isotope_mc` section")?;
                if m.particles == 0 {
                    bail!("`isotope_mc.particles` must be positive");
                }
                if m.start.iter().any(|&c| c >= n) {
                    bail!("`isotope_mc.start` must lie below n = {n}");
                }
                if m.checkpoints.is_empty()
                    || m.checkpoints.windows(2).any(|w| !(w[1] > w[0]))
                    || !(m.checkpoints[0] > 0.0)
                {
                    bail!("`isotope_mc.checkpoints` must be positive and strictly increasing");
                }
                if let Some(dt) = m.grid_dt {
                    positive(dt, "isotope_mc.grid_dt")?;
                }
            }
            Scenario::Turbulence => {
                if model.is_lattice() {
                    bail!("scenario turbulence needs a continuum model");
                }
                let t = self.turbulence.as_ref().context("scenario turbulence needs a `turbulence` section")?;
                positive(t.band[0], "turbulence.band")?;
                if !(t.band[1] > t.band[0]) || !t.band[1].is_finite() {
                    bail!("`turbulence.band` must be increasing");
                }
                match t.mode {
                    TurbulenceMode::Scan => {
                        if t.sigmas.as_ref().is_none_or(|v| v.len() < 2) {
                            bail!("scan mode needs at least two `sigmas`");
                        }
                    }
                    TurbulenceMode::Collide => {
                        need(t.sigma, "turbulence.sigma", s)?;
                        if need(t.bins, "turbulence.bins", s)? < 2 {
                            bail!("`turbulence.bins` must be at least 2");
                        }
                    }
                    TurbulenceMode::Forced => {
                        if need(t.bins, "turbulence.bins", s)? < 2 {
                            bail!("`turbulence.bins` must be at least 2");
                        }
                        let f = t.forcing.as_ref().context("forced mode needs a `forcing` section")?;
                        positive(f.amplitude, "forcing.amplitude")?;
                        positive(f.source_rate, "forcing.source_rate")?;
                        positive(f.sink_above, "forcing.sink_above")?;
                        positive(f.sink_power, "forcing.sink_power")?;
                        if !(f.sink_above > f.source_below) {
                            bail!("the sink must lie above the source");
                        }
                        time("time")?;
                    }
                }
            }
            Scenario::Md => {
                if !model.is_lattice() {
                    bail!("scenario md needs a lattice model");
                }
                let m = self.md.as_ref().context("scenario md needs an `md` section")?;
                if m.side < 2 {
                    bail!("`md.side` must be at least 2");
                }
                positive(m.dt, "md.dt")?;
                if !(m.epsilon >= 0.0) {
                    bail!("`md.epsilon` must be nonnegative");
                }
                if m.steps == 0 || m.record_every == 0 {
                    bail!("`md.steps` and `md.record_every` must be positive");
                }
                match m.mode {
                    MdMode::Occupation | MdMode::Drift => {
                        positive(need(m.theta, "md.theta", s)?, "md.theta")?;
                        if !(m.modulation.abs() < 1.0) {
                            bail!("`md.modulation` must lie in (−1, 1)");
                        }
                        if m.ensemble < 2 {
                            bail!("`md.ensemble` must be at least 2");
                        }
                    }
                    MdMode::Decay => {
                        positive(need(m.c0, "md.c0", s)?, "md.c0")?;
                        let e = need(m.excite, "md.excite", s)?;
                        if e.iter().any(|&c| c >= m.side) {
                            bail!("`md.excite` must lie below md.side");
                        }
                        if m.ensemble == 0 {
                            bail!("`md.ensemble` must be positive");
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn statistics(&self) -> Statistics {
        self.statistics.unwrap_or(Statistics::Classical)
    }

    pub fn collision_params(&self) -> Result<Option<phonon_kinetics::CollisionParams<f64>>> {
        let w0 = self.model.as_ref().map_or(0.0, |m| m.omega0());
        Ok(match (self.gamma, self.lambda) {
            (Some(g), _) => Some(phonon_kinetics::CollisionParams::from_gamma(g, w0)?),
            (None, Some(l)) => Some(phonon_kinetics::CollisionParams::from_lambda(l, w0)),
            (None, None) => None,
        })
    }
}
