//! R-localized filters on a periodic one-dimensional grid.
//!
//! Every grid point `x_k` gets its own transform `D(x_k)`, built from
//! observations tapered by their distance to `x_k`; row `k` of the analysis
//! is row `k` of the input ensemble times `D(x_k)`. Particle transforms use
//! the scalar cost `|u_i(x_k) - u_j(x_k)|^2` of the grid-point values.

use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;

use crate::ensemble::{Ensemble, WeightVector};
use crate::error::{FilterError, Result};
use crate::kalman::{esrf_transform, gaspari_cohn, BridgingConfig, HybridOrder};
use crate::observation::ObservationModel;
use crate::particle::{derive_seed, particle_transform, ParticleKind, ParticleOptions};
use crate::transform::TransformMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationConfig {
    /// Gaspari-Cohn half-width in grid points.
    pub radius: f64,
    /// Number of points of the periodic grid.
    pub grid_size: usize,
}

impl LocalizationConfig {
    pub fn new(radius: f64, grid_size: usize) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(FilterError::InvalidParameter(format!(
                "localization radius must be positive, got {radius}"
            )));
        }
        if grid_size == 0 {
            return Err(FilterError::InvalidParameter("grid must not be empty".into()));
        }
        Ok(Self { radius, grid_size })
    }

    /// Shortest distance between grid points `a` and `b` on the ring.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        periodic_distance(a, b, self.grid_size)
    }

    /// Taper value of every observation for grid point `k`.
    pub fn taper(&self, k: usize, obs: &ObservationModel) -> Result<Vec<f64>> {
        let locations = obs.observed_indices().ok_or_else(|| {
            FilterError::InvalidParameter("localization needs a component-selection operator".into())
        })?;
        Ok(locations
            .iter()
            .map(|&l| gaspari_cohn(self.distance(k, l), self.radius))
            .collect())
    }
}

pub fn periodic_distance(a: usize, b: usize, n: usize) -> f64 {
    let d = a.abs_diff(b) % n;
    d.min(n - d) as f64
}

/// Rows computed independently per grid point, reassembled in grid order.
/// The first failing grid point (lowest index) is reported.
fn per_grid_point<F>(ens: &Ensemble, loc: &LocalizationConfig, row: F) -> Result<Ensemble>
where
    F: Fn(usize) -> Result<RowDVector<f64>> + Sync,
{
    if ens.dim() != loc.grid_size {
        return Err(FilterError::DimensionMismatch {
            context: "state dimension vs localization grid",
            expected: loc.grid_size,
            actual: ens.dim(),
        });
    }
    let rows: Vec<Result<RowDVector<f64>>> = (0..loc.grid_size).into_par_iter().map(&row).collect();
    let mut states = DMatrix::zeros(ens.dim(), ens.size());
    for (k, r) in rows.into_iter().enumerate() {
        states.set_row(k, &r.map_err(|e| e.at_grid_point(k))?);
    }
    Ok(Ensemble::new(states)?.with_time_index(ens.time_index()))
}

fn grid_row(ens: &Ensemble, k: usize) -> RowDVector<f64> {
    ens.states().row(k).into_owned()
}

/// Localized tempered importance weights for grid point `k`.
pub fn local_weights(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    loc: &LocalizationConfig,
    k: usize,
    alpha: f64,
) -> Result<WeightVector> {
    let taper = loc.taper(k, obs)?;
    let mut logs = obs.tapered_log_likelihoods(ens, y, &taper)?;
    if alpha != 1.0 {
        logs.iter_mut().for_each(|l| *l *= alpha);
    }
    WeightVector::from_log_weights(&logs)
}

/// Particle transform `D(x_k)` for grid point `k`.
pub fn local_particle_transform(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    loc: &LocalizationConfig,
    k: usize,
    kind: ParticleKind,
    alpha: f64,
    rotation_seed: u64,
    options: &ParticleOptions,
) -> Result<TransformMatrix> {
    let w = local_weights(ens, y, obs, loc, k, alpha)?;
    let scalar = Ensemble::new(DMatrix::from_row_slice(1, ens.size(), grid_row(ens, k).as_slice()))?;
    particle_transform(&scalar, &w, kind, derive_seed(rotation_seed, k as u64), options)
}

/// Localized particle analysis under `pi^alpha`.
pub fn local_particle_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    loc: &LocalizationConfig,
    kind: ParticleKind,
    alpha: f64,
    rotation_seed: u64,
    options: &ParticleOptions,
) -> Result<Ensemble> {
    per_grid_point(ens, loc, |k| {
        let d = local_particle_transform(ens, y, obs, loc, k, kind, alpha, rotation_seed, options)?;
        Ok(grid_row(ens, k) * d.matrix())
    })
}

/// LETKF analysis with observation error `r_scale * R`.
pub fn letkf_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    loc: &LocalizationConfig,
    r_scale: f64,
) -> Result<Ensemble> {
    per_grid_point(ens, loc, |k| {
        let taper = loc.taper(k, obs)?;
        let d = esrf_transform(ens, y, obs, r_scale, Some(&taper))?;
        Ok(grid_row(ens, k) * d.matrix())
    })
}

/// Localized hybrid analysis; `alpha = 0` is the LETKF and `alpha = 1` the
/// localized particle step.
pub fn local_hybrid_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    loc: &LocalizationConfig,
    cfg: &BridgingConfig,
    rotation_seed: u64,
    options: &ParticleOptions,
) -> Result<Ensemble> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        return letkf_step(ens, y, obs, loc, 1.0);
    }
    if cfg.alpha == 1.0 {
        return local_particle_step(ens, y, obs, loc, cfg.particle, 1.0, rotation_seed, options);
    }
    let particle =
        |e: &Ensemble| local_particle_step(e, y, obs, loc, cfg.particle, cfg.alpha, rotation_seed, options);
    let kalman = |e: &Ensemble| letkf_step(e, y, obs, loc, cfg.kalman_r_scale());
    match cfg.order {
        HybridOrder::ParticleFirst => kalman(&particle(ens)?),
        HybridOrder::KalmanFirst => particle(&kalman(ens)?),
    }
}
