//! Identical-twin experiments: truth and observation generation, the
//! forecast/analysis loop with rejuvenation, and RMSE/CRPS scoring.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{integrate, observation_network, propagate, propagate_state, Model, ModelSpec, ObservationKind};
use crate::ensemble::Ensemble;
use crate::error::{FilterError, Result};
use crate::kalman::{esrf_step, hybrid_step, particle_step, BridgingConfig};
use crate::localization::{letkf_step, local_hybrid_step, local_particle_step, LocalizationConfig};
use crate::observation::ObservationModel;
use crate::particle::{derive_seed, ParticleKind, ParticleOptions};

/// Analysis scheme applied every cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pipeline {
    Esrf,
    Particle(ParticleKind),
    Hybrid(BridgingConfig),
}

impl Pipeline {
    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Esrf => "esrf",
            Pipeline::Particle(kind) => kind.name(),
            Pipeline::Hybrid(_) => "hybrid",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Pipeline::Esrf => Ok(()),
            Pipeline::Particle(kind) => BridgingConfig::new(1.0, *kind).map(|_| ()),
            Pipeline::Hybrid(cfg) => cfg.validate(),
        }
    }
}

/// Seeds of the independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSet {
    pub truth: u64,
    pub obs_noise: u64,
    pub init_ensemble: u64,
    pub rejuvenation: u64,
    pub random_rotations: u64,
}

impl Default for SeedSet {
    fn default() -> Self {
        Self {
            truth: 1,
            obs_noise: 2,
            init_ensemble: 3,
            rejuvenation: 4,
            random_rotations: 5,
        }
    }
}

impl SeedSet {
    /// Every seed shifted by `offset`, for repetitions.
    pub fn offset(self, offset: u64) -> Self {
        Self {
            truth: self.truth.wrapping_add(offset),
            obs_noise: self.obs_noise.wrapping_add(offset),
            init_ensemble: self.init_ensemble.wrapping_add(offset),
            rejuvenation: self.rejuvenation.wrapping_add(offset),
            random_rotations: self.random_rotations.wrapping_add(offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub spec: ModelSpec,
    pub observation: ObservationKind,
    /// Observation error variance; `R = r_value I`.
    pub r_value: f64,
    pub members: usize,
    pub pipeline: Pipeline,
    /// Rejuvenation strength; zero disables it.
    pub beta: f64,
    pub cycles: usize,
    /// Leading cycles excluded from the time averages.
    pub burn_in: usize,
    pub seeds: SeedSet,
    pub localization: Option<LocalizationConfig>,
    /// Observation intervals integrated before the truth is recorded.
    pub spin_up: usize,
    /// Standard deviation of the initial ensemble around the truth.
    pub init_spread: f64,
    pub particle: ParticleOptions,
    /// Keep per-cycle scores in the report.
    pub record_series: bool,
}

impl ExperimentConfig {
    /// Defaults: `R = 8`, `beta = 0.2`, burn-in of 10% of the cycles.
    pub fn new(spec: ModelSpec, observation: ObservationKind, members: usize, pipeline: Pipeline, cycles: usize) -> Self {
        Self {
            spec,
            observation,
            r_value: 8.0,
            members,
            pipeline,
            beta: 0.2,
            cycles,
            burn_in: cycles / 10,
            seeds: SeedSet::default(),
            localization: None,
            spin_up: 1000,
            init_spread: 1.0,
            particle: ParticleOptions::default(),
            record_series: false,
        }
    }

    pub fn lorenz63(members: usize, pipeline: Pipeline, cycles: usize) -> Self {
        Self::new(ModelSpec::lorenz63(), ObservationKind::FirstComponent, members, pipeline, cycles)
    }

    /// Lorenz-96 with every second grid point observed and localization radius 4.
    pub fn lorenz96(members: usize, pipeline: Pipeline, cycles: usize) -> Self {
        let spec = ModelSpec::lorenz96();
        let mut cfg = Self::new(spec, ObservationKind::EverySecond, members, pipeline, cycles);
        cfg.localization = Some(LocalizationConfig {
            radius: 4.0,
            grid_size: spec.model.dim(),
        });
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.pipeline.validate()?;
        if self.members < 2 {
            return Err(FilterError::InvalidParameter(format!(
                "ensemble size must be at least 2, got {}",
                self.members
            )));
        }
        if self.cycles == 0 {
            return Err(FilterError::InvalidParameter("at least one cycle is required".into()));
        }
        if self.burn_in >= self.cycles {
            return Err(FilterError::InvalidParameter(format!(
                "burn-in {} must be smaller than the cycle count {}",
                self.burn_in, self.cycles
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(FilterError::InvalidParameter("rejuvenation beta must be non-negative".into()));
        }
        if !(self.init_spread >= 0.0) || !self.init_spread.is_finite() {
            return Err(FilterError::InvalidParameter("initial spread must be non-negative".into()));
        }
        if let Some(loc) = &self.localization {
            LocalizationConfig::new(loc.radius, loc.grid_size)?;
            if loc.grid_size != self.spec.model.dim() {
                return Err(FilterError::InvalidParameter(
                    "localization grid must match the state dimension".into(),
                ));
            }
        }
        self.observation_model().map(|_| ())
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        observation_network(&self.spec, self.observation, self.r_value)
    }
}

/// Truth trajectory `z(t_0), ..., z(t_K)` and observations `y_1, ..., y_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinData {
    pub truth: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn fixed_point(model: &Model) -> DVector<f64> {
    match *model {
        Model::Lorenz63 { rho, beta, .. } => {
            let c = (beta * (rho - 1.0)).max(0.0).sqrt();
            DVector::from_vec(vec![c, c, rho - 1.0])
        }
        Model::Lorenz96 { p, forcing } => DVector::from_element(p, forcing),
    }
}

pub fn generate_truth_and_obs(cfg: &ExperimentConfig) -> Result<TwinData> {
    let obs = cfg.observation_model()?;
    let spec = &cfg.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.truth);
    let mut state = fixed_point(&spec.model) + normal_vector(&mut rng, spec.model.dim());
    integrate(&spec.model, state.as_mut_slice(), spec.dt_internal, cfg.spin_up * spec.steps_per_interval());
    if state.iter().any(|x| !x.is_finite()) {
        return Err(FilterError::IntegrationBlowUp { member: 0 });
    }
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seeds.obs_noise);
    let l = obs.covariance_sqrt();
    let mut truth = Vec::with_capacity(cfg.cycles + 1);
    let mut observations = Vec::with_capacity(cfg.cycles);
    truth.push(state.clone());
    for _ in 0..cfg.cycles {
        state = propagate_state(&state, spec)?;
        let eta = &l * normal_vector(&mut noise, obs.obs_dim());
        observations.push(obs.apply(state.column(0)) + eta);
        truth.push(state.clone());
    }
    Ok(TwinData { truth, observations })
}

/// Truth plus independent perturbations of standard deviation `spread`.
pub fn initial_ensemble(truth0: &DVector<f64>, members: usize, spread: f64, seed: u64) -> Result<Ensemble> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = truth0.len();
    let mut states = DMatrix::zeros(n, members);
    for j in 0..members {
        for i in 0..n {
            let xi: f64 = rng.sample(StandardNormal);
            states[(i, j)] = truth0[i] + spread * xi;
        }
    }
    Ensemble::new(states)
}

/// `z_j <- z_j + sum_i (z_i^f - mean^f) beta xi_ij / sqrt(M - 1)` with the
/// forecast anomalies. Always draws `M x M` normals so the stream advances
/// identically for every `beta`.
pub fn rejuvenate<R: Rng>(analysis: &Ensemble, forecast: &Ensemble, beta: f64, rng: &mut R) -> Result<Ensemble> {
    let m = analysis.size();
    if forecast.size() != m || forecast.dim() != analysis.dim() {
        return Err(FilterError::DimensionMismatch {
            context: "forecast vs analysis ensemble",
            expected: m,
            actual: forecast.size(),
        });
    }
    let xi = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    if beta == 0.0 {
        return Ok(analysis.clone());
    }
    let noise = forecast.anomalies() * xi * (beta / ((m - 1) as f64).sqrt());
    Ok(Ensemble::new(analysis.states() + noise)?.with_time_index(analysis.time_index()))
}

/// Analysis step of `cfg.pipeline` (global or localized).
pub fn assimilation_cycle(
    forecast: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
    cfg: &ExperimentConfig,
    rotation_seed: u64,
) -> Result<Ensemble> {
    let opts = &cfg.particle;
    match (&cfg.localization, cfg.pipeline) {
        (None, Pipeline::Esrf) => esrf_step(forecast, y, obs, 1.0),
        (None, Pipeline::Particle(kind)) => particle_step(forecast, y, obs, kind, 1.0, rotation_seed, opts),
        (None, Pipeline::Hybrid(b)) => hybrid_step(forecast, y, obs, &b, rotation_seed, opts),
        (Some(loc), Pipeline::Esrf) => letkf_step(forecast, y, obs, loc, 1.0),
        (Some(loc), Pipeline::Particle(kind)) => {
            local_particle_step(forecast, y, obs, loc, kind, 1.0, rotation_seed, opts)
        }
        (Some(loc), Pipeline::Hybrid(b)) => local_hybrid_step(forecast, y, obs, loc, &b, rotation_seed, opts),
    }
}

/// `sqrt(|mean - truth|^2 / N_z)`.
pub fn cycle_rmse(mean: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    ((mean - truth).norm_squared() / truth.len() as f64).sqrt()
}

/// Time-averaged RMSE of a series of ensemble means.
pub fn rmse(means: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    if means.len() != truth.len() || means.is_empty() {
        return Err(FilterError::DimensionMismatch {
            context: "mean series vs truth series",
            expected: truth.len(),
            actual: means.len(),
        });
    }
    Ok(means.iter().zip(truth).map(|(m, t)| cycle_rmse(m, t)).sum::<f64>() / means.len() as f64)
}

/// Empirical CRPS `(1/M) sum |x_i - y| - (1/(2 M^2)) sum_ij |x_i - x_j|`.
pub fn crps(values: &[f64], y: f64) -> f64 {
    let m = values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let skill = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    // sum_ij |x_i - x_j| = 2 sum_i (2i - M + 1) x_(i) over the sorted sample.
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - m + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    (skill - spread / (2.0 * m * m)).max(0.0)
}

/// Per-cycle analysis scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleScore {
    pub cycle: usize,
    pub rmse: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub rmse: f64,
    pub crps: f64,
    pub scored_cycles: usize,
    pub wall_time_s: f64,
    pub series: Option<Vec<CycleScore>>,
    pub config: ExperimentConfig,
}

fn score(ens: &Ensemble, truth: &DVector<f64>, observed: &[usize], cycle: usize) -> CycleScore {
    let crps_mean = observed
        .iter()
        .map(|&c| {
            let row: Vec<f64> = ens.states().row(c).iter().copied().collect();
            crps(&row, truth[c])
        })
        .sum::<f64>()
        / observed.len() as f64;
    CycleScore {
        cycle,
        rmse: cycle_rmse(&ens.mean(), truth),
        crps: crps_mean,
    }
}

struct Accumulator {
    rmse: f64,
    crps: f64,
    count: usize,
    series: Option<Vec<CycleScore>>,
}

impl Accumulator {
    fn new(record: bool) -> Self {
        Self {
            rmse: 0.0,
            crps: 0.0,
            count: 0,
            series: record.then(Vec::new),
        }
    }

    fn push(&mut self, s: CycleScore) {
        self.rmse += s.rmse;
        self.crps += s.crps;
        self.count += 1;
        if let Some(series) = &mut self.series {
            series.push(s);
        }
    }

    fn finish(self, cfg: &ExperimentConfig, start: Instant) -> ScoreReport {
        let n = self.count.max(1) as f64;
        ScoreReport {
            rmse: self.rmse / n,
            crps: self.crps / n,
            scored_cycles: self.count,
            wall_time_s: start.elapsed().as_secs_f64(),
            series: self.series,
            config: cfg.clone(),
        }
    }
}

/// Runs the full twin experiment: forecast, analysis, scoring, rejuvenation.
///
/// Scores use the analysis before rejuvenation; cycles `1..=burn_in` are
/// excluded from the averages.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ScoreReport> {
    cfg.validate()?;
    let twin = generate_truth_and_obs(cfg)?;
    run_experiment_on(cfg, &twin)
}

/// [`run_experiment`] on precomputed truth and observations.
pub fn run_experiment_on(cfg: &ExperimentConfig, twin: &TwinData) -> Result<ScoreReport> {
    cfg.validate()?;
    let start = Instant::now();
    let obs = cfg.observation_model()?;
    let observed = obs.observed_indices().unwrap_or(&[]).to_vec();
    let mut rejuv = ChaCha8Rng::seed_from_u64(cfg.seeds.rejuvenation);
    let mut ens = initial_ensemble(&twin.truth[0], cfg.members, cfg.init_spread, cfg.seeds.init_ensemble)?;
    let mut acc = Accumulator::new(cfg.record_series);
    for cycle in 1..=cfg.cycles {
        let forecast = propagate(&ens, &cfg.spec).map_err(|e| e.at_cycle(cycle, "forecast"))?;
        let rotation_seed = derive_seed(cfg.seeds.random_rotations, cycle as u64);
        let analysis = assimilation_cycle(&forecast, &twin.observations[cycle - 1], &obs, cfg, rotation_seed)
            .map_err(|e| e.at_cycle(cycle, "analysis"))?;
        if cycle > cfg.burn_in {
            acc.push(score(&analysis, &twin.truth[cycle], &observed, cycle));
        }
        ens = rejuvenate(&analysis, &forecast, cfg.beta, &mut rejuv).map_err(|e| e.at_cycle(cycle, "rejuvenation"))?;
    }
    Ok(acc.finish(cfg, start))
}

/// Scores of the initial ensemble propagated without assimilation, on the
/// same truth and seeds.
pub fn free_run(cfg: &ExperimentConfig) -> Result<ScoreReport> {
    cfg.validate()?;
    let twin = generate_truth_and_obs(cfg)?;
    free_run_on(cfg, &twin)
}

pub fn free_run_on(cfg: &ExperimentConfig, twin: &TwinData) -> Result<ScoreReport> {
    let start = Instant::now();
    let obs = cfg.observation_model()?;
    let observed = obs.observed_indices().unwrap_or(&[]).to_vec();
    let mut ens = initial_ensemble(&twin.truth[0], cfg.members, cfg.init_spread, cfg.seeds.init_ensemble)?;
    let mut acc = Accumulator::new(cfg.record_series);
    for cycle in 1..=cfg.cycles {
        ens = propagate(&ens, &cfg.spec).map_err(|e| e.at_cycle(cycle, "forecast"))?;
        if cycle > cfg.burn_in {
            acc.push(score(&ens, &twin.truth[cycle], &observed, cycle));
        }
    }
    Ok(acc.finish(cfg, start))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crps_examples() {
        assert_eq!(crps(&[1.5, 1.5, 1.5], 1.5), 0.0);
        assert_eq!(crps(&[3.0], 1.0), 2.0);
        assert!((crps(&[0.0, 1.0], 0.0) - 0.25).abs() < 1e-15);
        assert_eq!(crps(&[2.0, 0.0, 1.0], 0.4), crps(&[0.0, 1.0, 2.0], 0.4));
    }

    #[test]
    fn rmse_examples() {
        let t = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![0.0, 0.0])];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        let shifted: Vec<_> = t.iter().map(|v| v.add_scalar(-0.5)).collect();
        assert!((rmse(&shifted, &t).unwrap() - 0.5).abs() < 1e-15);
        let a = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 0.0])];
        let expected = (cycle_rmse(&a[0], &t[0]) + cycle_rmse(&a[1], &t[1])) / 2.0;
        assert_eq!(rmse(&a, &t).unwrap(), expected);
    }

    #[test]
    fn rejuvenation_edge_cases() {
        let ens = Ensemble::from_scalars(&[0.0, 1.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(rejuvenate(&ens, &ens, 0.0, &mut rng).unwrap(), ens);
        let constant = Ensemble::from_scalars(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(rejuvenate(&ens, &constant, 0.5, &mut rng).unwrap().states(), ens.states());
    }

    #[test]
    fn twin_data_shape_and_determinism() {
        let mut cfg = ExperimentConfig::lorenz63(5, Pipeline::Esrf, 30);
        cfg.spin_up = 50;
        let a = generate_truth_and_obs(&cfg).unwrap();
        assert_eq!(a.observations.len(), 30);
        assert_eq!(a.truth.len(), 31);
        assert!(a.observations.iter().all(|y| y.len() == 1));
        assert_eq!(a, generate_truth_and_obs(&cfg).unwrap());
        cfg.r_value = 1e-12;
        let b = generate_truth_and_obs(&cfg).unwrap();
        for (y, z) in b.observations.iter().zip(&b.truth[1..]) {
            assert!((y[0] - z[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::lorenz63(5, Pipeline::Esrf, 10);
        assert!(cfg.validate().is_ok());
        cfg.burn_in = 10;
        assert!(cfg.validate().is_err());
        cfg.burn_in = 1;
        cfg.members = 1;
        assert!(cfg.validate().is_err());
        cfg.members = 5;
        cfg.pipeline = Pipeline::Particle(ParticleKind::EtpfSinkhorn { lambda: 0.0 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_scored_cycle() {
        let mut cfg = ExperimentConfig::lorenz63(5, Pipeline::Esrf, 4);
        cfg.burn_in = 3;
        cfg.spin_up = 10;
        cfg.record_series = true;
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.scored_cycles, 1);
        assert_eq!(report.series.as_ref().unwrap().len(), 1);
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(report.rmse, again.rmse);
        assert_eq!(report.crps, again.crps);
    }
}
