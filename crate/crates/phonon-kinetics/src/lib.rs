//! Phonon Boltzmann kinetics for weakly anharmonic scalar lattices.
//!
//! The crate covers the harmonic lattice (dispersion, resonances, density of
//! states), the three-phonon and isotope collision operators with their
//! entropy functionals, time integration of the kinetic equation, the
//! linearized operator and thermal conductivity, continuum four-wave
//! turbulence, and microscopic lattice dynamics for cross-checks.
//!
//! Numerical code is generic over [`Real`]; the `*64` aliases below fix it to
//! `f64`, which is what the CLI uses.

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod collision;
pub mod error;
pub mod jump;
pub mod lattice;
pub mod linear;
pub mod micro;
pub mod modes;
pub mod rng;
pub mod scalar;
pub mod solver;
pub mod turbulence;

pub use collision::{
    build_triples, build_triples_windowed, collide, collide_classical, collide_conservative, collide_isotope, collide_quantum,
    energy, entropy, entropy_production, fejer_kernel, CollisionParams, IsotopeKernel, Kernel, PrefactorKind,
    TripleList,
};
pub use error::{Error, Result};
pub use lattice::{BrillouinGrid, Couplings, DispersionModel};
pub use modes::{ModeSet, Occupation, Statistics};
pub use scalar::{Real, Vec3};

pub type DispersionModel64 = DispersionModel<f64>;
pub type DispersionModel32 = DispersionModel<f32>;
pub type ModeSet64 = ModeSet<f64>;
pub type Occupation64 = Occupation<f64>;
pub type Occupation32 = Occupation<f32>;
pub type TripleList64 = TripleList<f64>;
pub type TripleList32 = TripleList<f32>;
pub type CollisionParams64 = CollisionParams<f64>;
pub type IsotopeKernel64 = IsotopeKernel<f64>;
