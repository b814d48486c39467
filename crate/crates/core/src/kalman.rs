//! Ensemble transform Kalman filter, its first-order projection and the
//! hybrid particle/Kalman step.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::ensemble::{Ensemble, WeightVector};
use crate::error::{FilterError, Result};
use crate::observation::ObservationModel;
use crate::particle::{particle_transform, ParticleKind, ParticleOptions};
use crate::transform::{apply_transform, TransformMatrix};

/// Deterministic ETKF analysis transform with observation error `r_scale * R`.
///
/// With `taper`, the precision becomes `T^{1/2} R~^{-1} T^{1/2}` for
/// `T = diag(taper)`, which is how R-localization enters. The transform has
/// unit column sums; the internal covariance convention is the unbiased one.
pub fn esrf_transform(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    r_scale: f64,
    taper: Option<&[f64]>,
) -> Result<TransformMatrix> {
    if !(r_scale > 0.0) || !r_scale.is_finite() {
        return Err(FilterError::InvalidParameter(format!(
            "observation error scale must be positive and finite, got {r_scale}"
        )));
    }
    obs.check_obs(y)?;
    let m = ens.size();
    let hz = obs.apply_ensemble(ens)?;
    let y_mean = hz.column_mean();
    let mut y_anom = hz;
    for mut col in y_anom.column_iter_mut() {
        col -= &y_mean;
    }
    let precision = match taper {
        Some(t) => obs.tapered_precision(t)? / r_scale,
        None => obs.precision() / r_scale,
    };
    let c = y_anom.tr_mul(&precision);
    let mut inner = &c * &y_anom;
    inner = (&inner + inner.transpose()) * 0.5;
    let m1 = (m - 1) as f64;
    for i in 0..m {
        inner[(i, i)] += m1;
    }
    let eig = SymmetricEigen::new(inner);
    if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
        return Err(FilterError::InvalidParameter("singular ETKF inner matrix".into()));
    }
    let v = &eig.eigenvectors;
    let scaled = |f: &dyn Fn(f64) -> f64| {
        let mut s = v.clone();
        for (j, mut col) in s.column_iter_mut().enumerate() {
            col *= f(eig.eigenvalues[j]);
        }
        s * v.transpose()
    };
    let p_tilde = scaled(&|l| 1.0 / l);
    let mut w_a = scaled(&|l| (m1 / l).sqrt());
    let w_mean = p_tilde * (c * (y - y_mean));
    for mut col in w_a.column_iter_mut() {
        col += &w_mean;
    }
    // D = 1 1^T / M + (I - 1 1^T / M)(w_mean 1^T + W_a).
    let col_means: Vec<f64> = w_a.column_iter().map(|c| c.mean()).collect();
    let inv = 1.0 / m as f64;
    let d = DMatrix::from_fn(m, m, |i, j| inv + w_a[(i, j)] - col_means[j]);
    if d.iter().any(|x| !x.is_finite()) {
        return Err(FilterError::NonFinite("ETKF transform".into()));
    }
    TransformMatrix::unclassified(d)
}

/// `D (I - 1 1^T / M) + w 1^T`: a transform with unit column sums mapped
/// into the first-order class for `w`.
pub fn project_to_d1(d: &TransformMatrix, w: &WeightVector) -> Result<TransformMatrix> {
    let m = d.size();
    if w.len() != m {
        return Err(FilterError::DimensionMismatch {
            context: "transform vs weights",
            expected: m,
            actual: w.len(),
        });
    }
    let row_means: Vec<f64> = d.matrix().row_iter().map(|r| r.mean()).collect();
    let projected = DMatrix::from_fn(m, m, |i, j| d.matrix()[(i, j)] - row_means[i] + w.as_slice()[i]);
    TransformMatrix::classify(projected, w)
}

/// Fifth-order Gaspari-Cohn taper with half-width `radius` (support `2 radius`).
pub fn gaspari_cohn(distance: f64, radius: f64) -> f64 {
    let z = distance.abs() / radius;
    if z <= 1.0 {
        ((((-0.25 * z + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z) * z + 1.0
    } else if z < 2.0 {
        (((((z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z + 4.0 - 2.0 / (3.0 * z)).max(0.0)
    } else {
        0.0
    }
}

/// Which factor of the split likelihood is assimilated first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HybridOrder {
    #[default]
    ParticleFirst,
    KalmanFirst,
}

/// Likelihood split `pi^alpha * pi^(1 - alpha)` between a particle transform
/// and the ETKF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgingConfig {
    pub alpha: f64,
    pub particle: ParticleKind,
    pub order: HybridOrder,
}

impl BridgingConfig {
    pub fn new(alpha: f64, particle: ParticleKind) -> Result<Self> {
        let cfg = Self {
            alpha,
            particle,
            order: HybridOrder::ParticleFirst,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FilterError::InvalidParameter(format!(
                "bridging alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if let Some(lambda) = self.particle.lambda() {
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(FilterError::InvalidParameter(format!(
                    "Sinkhorn lambda must be positive, got {lambda}"
                )));
            }
        }
        Ok(())
    }

    /// Error scale of the Kalman factor, `1 / (1 - alpha)`.
    pub fn kalman_r_scale(&self) -> f64 {
        1.0 / (1.0 - self.alpha)
    }
}

/// Importance weights under the tempered likelihood `pi^alpha`.
pub fn tempered_weights(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    alpha: f64,
) -> Result<WeightVector> {
    let mut logs = obs.log_likelihoods(ens, y)?;
    if alpha != 1.0 {
        logs.iter_mut().for_each(|l| *l *= alpha);
    }
    WeightVector::from_log_weights(&logs)
}

/// Particle analysis of `ens` under `pi^alpha`.
pub fn particle_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    kind: ParticleKind,
    alpha: f64,
    rotation_seed: u64,
    options: &ParticleOptions,
) -> Result<Ensemble> {
    let w = tempered_weights(ens, y, obs, alpha)?;
    let d = particle_transform(ens, &w, kind, rotation_seed, options)?;
    apply_transform(ens, &d)
}

/// ETKF analysis of `ens` with observation error `r_scale * R`.
pub fn esrf_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    r_scale: f64,
) -> Result<Ensemble> {
    apply_transform(ens, &esrf_transform(ens, y, obs, r_scale, None)?)
}

/// Hybrid analysis. `alpha = 0` is the pure ETKF step and `alpha = 1` the
/// pure particle step; in between both factors are assimilated in turn.
pub fn hybrid_step(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    cfg: &BridgingConfig,
    rotation_seed: u64,
    options: &ParticleOptions,
) -> Result<Ensemble> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        return esrf_step(ens, y, obs, 1.0);
    }
    if cfg.alpha == 1.0 {
        return particle_step(ens, y, obs, cfg.particle, 1.0, rotation_seed, options);
    }
    let particle = |e: &Ensemble| particle_step(e, y, obs, cfg.particle, cfg.alpha, rotation_seed, options);
    let kalman = |e: &Ensemble| esrf_step(e, y, obs, cfg.kalman_r_scale());
    match cfg.order {
        HybridOrder::ParticleFirst => kalman(&particle(ens)?),
        HybridOrder::KalmanFirst => particle(&kalman(ens)?),
    }
}
