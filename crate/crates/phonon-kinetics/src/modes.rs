//! Discretized mode sets and occupation fields.

use crate::error::{invalid, Error, Result};
use crate::lattice::{BrillouinGrid, DispersionModel};
use crate::scalar::{Real, Vec3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistics {
    Classical,
    Quantum,
}

/// Grid frequencies of a lattice model, with the collision mask.
///
/// A grid point is active when `ω(k) > 0`. With `ω₀ = 0` this removes
/// `k = 0`, where `1/ω` is undefined; inactive points take part in no sum.
#[derive(Clone, Debug)]
pub struct ModeSet<T> {
    model: DispersionModel<T>,
    grid: BrillouinGrid,
    omega: Vec<T>,
    active: Vec<bool>,
}

impl<T: Real> ModeSet<T> {
    pub fn new(model: DispersionModel<T>, grid: BrillouinGrid) -> Result<Self> {
        if !model.is_lattice() {
            return invalid(format!("{} is not a lattice model", model.name()));
        }
        model.validate()?;
        let omega: Vec<T> = (0..grid.len()).map(|i| model.omega(&grid.k(i))).collect();
        let active = omega.iter().map(|&w| w > T::zero()).collect();
        Ok(Self { model, grid, omega, active })
    }

    pub fn model(&self) -> &DispersionModel<T> {
        &self.model
    }

    pub fn grid(&self) -> BrillouinGrid {
        self.grid
    }

    pub fn omega(&self) -> &[T] {
        &self.omega
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.omega.len()).filter(|&i| self.active[i]).collect()
    }

    /// Number of grid points `N³` (the measure normalization).
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn group_velocity(&self, i: usize) -> Vec3<T> {
        self.model.group_velocity(&self.grid.k(i)).unwrap_or([T::zero(); 3])
    }

    /// Equilibrium `W_β`: `1/βω` (classical) or `1/(e^{βω} − 1)` (quantum).
    /// Inactive points are set to zero.
    pub fn equilibrium(&self, beta: T, statistics: Statistics) -> Result<Occupation<T>> {
        if !(beta > T::zero()) || !beta.is_finite() {
            return invalid(format!("beta must be positive, got {beta}"));
        }
        let values = self
            .omega
            .iter()
            .zip(&self.active)
            .map(|(&w, &a)| if a { equilibrium_value(beta, w, statistics) } else { T::zero() })
            .collect();
        Occupation::new(self.grid, values, statistics)
    }
}

#[inline]
pub fn equilibrium_value<T: Real>(beta: T, w: T, statistics: Statistics) -> T {
    match statistics {
        Statistics::Classical => T::one() / (beta * w),
        Statistics::Quantum => T::one() / (beta * w).exp_m1(),
    }
}

/// `W W̃` at equilibrium, with `W̃ = 1 + W` (quantum) or `W̃ = W` (classical).
#[inline]
pub fn equilibrium_weight<T: Real>(beta: T, w: T, statistics: Statistics) -> T {
    let x = equilibrium_value(beta, w, statistics);
    match statistics {
        Statistics::Classical => x * x,
        Statistics::Quantum => x * (T::one() + x),
    }
}

/// Nonnegative occupation field `W(k)` on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupation<T> {
    grid: BrillouinGrid,
    values: Vec<T>,
    statistics: Statistics,
}

impl<T: Real> Occupation<T> {
    pub fn new(grid: BrillouinGrid, values: Vec<T>, statistics: Statistics) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Mismatch(format!(
                "occupation has {} values for a grid of {}",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(Error::Positivity(format!("W[{i}] = {} is not finite and nonnegative", values[i])));
        }
        Ok(Self { grid, values, statistics })
    }

    pub fn grid(&self) -> BrillouinGrid {
        self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn statistics(&self) -> Statistics {
        self.statistics
    }

    pub fn with_statistics(mut self, statistics: Statistics) -> Self {
        self.statistics = statistics;
        self
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// CSV rows `k1,k2,k3,W`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k1,k2,k3,W\n");
        for (i, w) in self.values.iter().enumerate() {
            let k: Vec3<T> = self.grid.k(i);
            out.push_str(&format!("{},{},{},{:e}\n", k[0], k[1], k[2], w));
        }
        out
    }
}
