//! Lorenz-63 and Lorenz-96 dynamics with fixed-step RK4 propagation.

use nalgebra::{DVector, DVectorViewMut};
use rayon::prelude::*;

use crate::ensemble::Ensemble;
use crate::error::{FilterError, Result};
use crate::observation::ObservationModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Lorenz96 { p: usize, forcing: f64 },
}

impl Model {
    pub fn lorenz63() -> Self {
        Model::Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }

    pub fn lorenz96() -> Self {
        Model::Lorenz96 { p: 40, forcing: 8.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Lorenz63 { .. } => 3,
            Model::Lorenz96 { p, .. } => *p,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Model::Lorenz63 { .. } => "lorenz63",
            Model::Lorenz96 { .. } => "lorenz96",
        }
    }

    /// Writes the vector field at `z` into `out`.
    pub fn rhs_into(&self, z: &[f64], out: &mut [f64]) {
        match *self {
            Model::Lorenz63 { sigma, rho, beta } => {
                out[0] = sigma * (z[1] - z[0]);
                out[1] = z[0] * (rho - z[2]) - z[1];
                out[2] = z[0] * z[1] - beta * z[2];
            }
            Model::Lorenz96 { p, forcing } => {
                for k in 0..p {
                    let next = z[(k + 1) % p];
                    let prev = z[(k + p - 1) % p];
                    let prev2 = z[(k + p - 2) % p];
                    out[k] = (next - prev2) * prev - z[k] + forcing;
                }
            }
        }
    }
}

pub fn lorenz63_rhs(z: &[f64; 3], sigma: f64, rho: f64, beta: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    Model::Lorenz63 { sigma, rho, beta }.rhs_into(z, &mut out);
    out
}

pub fn lorenz96_rhs(z: &[f64], forcing: f64) -> Result<Vec<f64>> {
    if z.len() < 4 {
        return Err(FilterError::InvalidParameter(format!(
            "Lorenz-96 needs at least 4 grid points, got {}",
            z.len()
        )));
    }
    let mut out = vec![0.0; z.len()];
    Model::Lorenz96 { p: z.len(), forcing }.rhs_into(z, &mut out);
    Ok(out)
}

/// Model, integrator step and observation interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub model: Model,
    pub dt_internal: f64,
    pub dt_obs: f64,
}

impl ModelSpec {
    pub fn new(model: Model, dt_internal: f64, dt_obs: f64) -> Result<Self> {
        let spec = Self {
            model,
            dt_internal,
            dt_obs,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn lorenz63() -> Self {
        Self {
            model: Model::lorenz63(),
            dt_internal: 0.01,
            dt_obs: 0.12,
        }
    }

    pub fn lorenz96() -> Self {
        Self {
            model: Model::lorenz96(),
            dt_internal: 0.01,
            dt_obs: 0.11,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Model::Lorenz96 { p, .. } = self.model {
            if p < 4 {
                return Err(FilterError::InvalidParameter(format!(
                    "Lorenz-96 needs at least 4 grid points, got {p}"
                )));
            }
        }
        if !(self.dt_internal > 0.0) || !self.dt_internal.is_finite() {
            return Err(FilterError::InvalidParameter("dt_internal must be positive".into()));
        }
        if !(self.dt_obs >= 0.0) || !self.dt_obs.is_finite() {
            return Err(FilterError::InvalidParameter("dt_obs must be non-negative".into()));
        }
        let ratio = self.dt_obs / self.dt_internal;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(FilterError::InvalidParameter(format!(
                "dt_obs = {} is not an integer multiple of dt_internal = {}",
                self.dt_obs, self.dt_internal
            )));
        }
        Ok(())
    }

    /// Internal steps per observation interval.
    pub fn steps_per_interval(&self) -> usize {
        (self.dt_obs / self.dt_internal).round() as usize
    }
}

/// One classical RK4 step of `dz/dt = f(z)` in place.
pub fn rk4_step<F>(f: F, z: &mut [f64], dt: f64)
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = z.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(z, &mut k1);
    for i in 0..n {
        tmp[i] = z[i] + 0.5 * dt * k1[i];
    }
    f(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = z[i] + 0.5 * dt * k2[i];
    }
    f(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = z[i] + dt * k3[i];
    }
    f(&tmp, &mut k4);
    for i in 0..n {
        z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Integrates `steps` RK4 steps of the model from `z`.
pub fn integrate(model: &Model, z: &mut [f64], dt: f64, steps: usize) {
    for _ in 0..steps {
        rk4_step(|x, out| model.rhs_into(x, out), z, dt);
    }
}

fn advance(spec: &ModelSpec, mut z: DVectorViewMut<'_, f64>) -> bool {
    let state = z.as_mut_slice();
    integrate(&spec.model, state, spec.dt_internal, spec.steps_per_interval());
    state.iter().all(|x| x.is_finite())
}

/// Advances a single state by one observation interval.
pub fn propagate_state(state: &DVector<f64>, spec: &ModelSpec) -> Result<DVector<f64>> {
    let mut z = state.clone();
    if !advance(spec, z.column_mut(0)) {
        return Err(FilterError::IntegrationBlowUp { member: 0 });
    }
    Ok(z)
}

/// Advances every member by one observation interval. Members are
/// integrated independently, so the result does not depend on scheduling.
pub fn propagate(ens: &Ensemble, spec: &ModelSpec) -> Result<Ensemble> {
    spec.validate()?;
    if ens.dim() != spec.model.dim() {
        return Err(FilterError::DimensionMismatch {
            context: "ensemble vs model dimension",
            expected: spec.model.dim(),
            actual: ens.dim(),
        });
    }
    let mut states = ens.states().clone();
    let mut ok = vec![true; ens.size()];
    states
        .column_iter_mut()
        .collect::<Vec<_>>()
        .into_par_iter()
        .zip(ok.par_iter_mut())
        .for_each(|(col, flag)| *flag = advance(spec, col));
    if let Some(member) = ok.iter().position(|f| !f) {
        return Err(FilterError::IntegrationBlowUp { member });
    }
    Ok(Ensemble::new(states)?.with_time_index(ens.time_index() + 1))
}

/// Observation layouts used in the twin experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    /// Only the first state component.
    FirstComponent,
    /// Every second component, starting from the first (0-based 0, 2, 4, ...).
    EverySecond,
    /// Every second component, starting from the second (0-based 1, 3, 5, ...).
    EverySecondShifted,
}

pub fn observation_network(spec: &ModelSpec, kind: ObservationKind, r_value: f64) -> Result<ObservationModel> {
    if !(r_value > 0.0) || !r_value.is_finite() {
        return Err(FilterError::InvalidParameter(format!(
            "observation error variance must be positive, got {r_value}"
        )));
    }
    let n = spec.model.dim();
    let indices: Vec<usize> = match (kind, spec.model) {
        (ObservationKind::FirstComponent, _) => vec![0],
        (ObservationKind::EverySecond, Model::Lorenz96 { .. }) => (0..n).step_by(2).collect(),
        (ObservationKind::EverySecondShifted, Model::Lorenz96 { .. }) => (1..n).step_by(2).collect(),
        (_, Model::Lorenz63 { .. }) => {
            return Err(FilterError::InvalidParameter(
                "every-second-component networks need a Lorenz-96 grid".into(),
            ))
        }
    };
    ObservationModel::selection(indices, r_value)
}
