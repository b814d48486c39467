//! Experiment configuration files: schema checking, default resolution and
//! sweep expansion.
//!
//! The schema is described in `crates/cli/CONFIG.md`. Every problem found in
//! a file is collected with the dotted key it concerns, so a single
//! validation pass reports all offending keys at once.

use std::fmt;

use letf::dynamics::{Model, ModelSpec, ObservationKind};
use letf::harness::{ExperimentConfig, Pipeline, SeedSet};
use letf::kalman::{BridgingConfig, HybridOrder};
use letf::localization::LocalizationConfig;
use letf::ParticleKind;
use serde::Serialize;
use toml::{Table, Value};

pub const DEFAULT_SWEEP_CAP: usize = 10_000;
pub const DEFAULT_LAMBDA: f64 = 10.0;

const TOP_KEYS: &[&str] = &[
    "model",
    "members",
    "cycles",
    "burn_in",
    "beta",
    "r",
    "observation",
    "dt_internal",
    "dt_obs",
    "spin_up",
    "init_spread",
    "model_params",
    "pipeline",
    "localization",
    "seeds",
    "solver",
    "sweep",
];
const PIPELINE_KEYS: &[&str] = &["kind", "lambda", "alpha", "particle", "order"];
const LOCALIZATION_KEYS: &[&str] = &["enabled", "radius"];
const SEED_KEYS: &[&str] = &["truth", "obs_noise", "init_ensemble", "rejuvenation", "random_rotations"];
const SOLVER_KEYS: &[&str] = &[
    "sinkhorn_epsilon",
    "sinkhorn_max_iter",
    "riccati_dtau",
    "riccati_tol",
    "riccati_max_steps",
    "riccati_residual_target",
];
const SWEEP_KEYS: &[&str] = &["pipeline", "members", "alpha", "lambda", "beta", "repetitions", "cap"];
const PARTICLE_KINDS: &[&str] = &[
    "etpf",
    "etpf_sinkhorn",
    "etpf2",
    "etpf2_sinkhorn",
    "netf_optimal",
    "netf_symmetric",
    "netf_random",
];

/// One problem in a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Problem {
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<Problem>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.problems.iter().map(|p| format!("{}: {}", p.key, p.message)).collect();
        write!(f, "invalid configuration: {}", parts.join("; "))
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelParams {
    Lorenz63 { sigma: f64, rho: f64, b: f64 },
    Lorenz96 { p: usize, forcing: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSettings {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particle: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<String>,
}

impl PipelineSettings {
    fn uses_sinkhorn(&self) -> bool {
        let kind = if self.kind == "hybrid" { self.particle.as_deref().unwrap_or("") } else { &self.kind };
        kind.ends_with("_sinkhorn")
    }

    /// Drops parameters the pipeline does not use so equivalent settings
    /// hash identically.
    fn normalize(&mut self) {
        if self.uses_sinkhorn() {
            self.lambda.get_or_insert(DEFAULT_LAMBDA);
        } else {
            self.lambda = None;
        }
        if self.kind == "hybrid" {
            self.particle.get_or_insert_with(|| "etpf2_sinkhorn".into());
            self.order.get_or_insert_with(|| "particle_first".into());
        } else {
            self.alpha = None;
            self.particle = None;
            self.order = None;
        }
    }

    /// Label used in result tables, e.g. `hybrid_etpf2_sinkhorn`.
    pub fn label(&self) -> String {
        match (&*self.kind, &self.particle) {
            ("hybrid", Some(p)) => format!("hybrid_{p}"),
            _ => self.kind.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalizationSettings {
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedSettings {
    pub truth: u64,
    pub obs_noise: u64,
    pub init_ensemble: u64,
    pub rejuvenation: u64,
    pub random_rotations: u64,
}

impl From<SeedSet> for SeedSettings {
    fn from(s: SeedSet) -> Self {
        Self {
            truth: s.truth,
            obs_noise: s.obs_noise,
            init_ensemble: s.init_ensemble,
            rejuvenation: s.rejuvenation,
            random_rotations: s.random_rotations,
        }
    }
}

impl From<SeedSettings> for SeedSet {
    fn from(s: SeedSettings) -> Self {
        Self {
            truth: s.truth,
            obs_noise: s.obs_noise,
            init_ensemble: s.init_ensemble,
            rejuvenation: s.rejuvenation,
            random_rotations: s.random_rotations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSettings {
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_max_iter: usize,
    pub riccati_dtau: f64,
    pub riccati_tol: f64,
    pub riccati_max_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub riccati_residual_target: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let p = letf::ParticleOptions::default();
        Self {
            sinkhorn_epsilon: p.sinkhorn.epsilon,
            sinkhorn_max_iter: p.sinkhorn.max_iter,
            riccati_dtau: p.second_order.riccati.dtau,
            riccati_tol: p.second_order.riccati.tol,
            riccati_max_steps: p.second_order.riccati.max_steps,
            riccati_residual_target: p.second_order.riccati.residual_target,
        }
    }
}

/// Fully resolved settings of one experiment. Its canonical JSON form is
/// what the configuration hash is computed from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub model: String,
    pub model_params: ModelParams,
    pub dt_internal: f64,
    pub dt_obs: f64,
    pub observation: String,
    pub r: f64,
    pub members: usize,
    pub cycles: usize,
    pub burn_in: usize,
    pub beta: f64,
    pub spin_up: usize,
    pub init_spread: f64,
    pub pipeline: PipelineSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationSettings>,
    pub seeds: SeedSettings,
    pub solver: SolverSettings,
}

fn particle_kind(name: &str, lambda: Option<f64>) -> Option<ParticleKind> {
    let lambda = lambda.unwrap_or(DEFAULT_LAMBDA);
    Some(match name {
        "etpf" => ParticleKind::EtpfExact,
        "etpf_sinkhorn" => ParticleKind::EtpfSinkhorn { lambda },
        "etpf2" => ParticleKind::Etpf2Exact,
        "etpf2_sinkhorn" => ParticleKind::Etpf2Sinkhorn { lambda },
        "netf_optimal" => ParticleKind::NetfOptimal,
        "netf_symmetric" => ParticleKind::NetfSymmetric,
        "netf_random" => ParticleKind::NetfRandom,
        _ => return None,
    })
}

fn observation_kind(name: &str) -> Option<ObservationKind> {
    match name {
        "first_component" => Some(ObservationKind::FirstComponent),
        "every_second" => Some(ObservationKind::EverySecond),
        "every_second_shifted" => Some(ObservationKind::EverySecondShifted),
        _ => None,
    }
}

impl Settings {
    /// The library configuration for these settings.
    pub fn to_experiment(&self) -> Result<ExperimentConfig, Problem> {
        let problem = |key: &str, message: String| Problem {
            key: key.into(),
            message,
        };
        let model = match self.model_params {
            ModelParams::Lorenz63 { sigma, rho, b } => Model::Lorenz63 { sigma, rho, beta: b },
            ModelParams::Lorenz96 { p, forcing } => Model::Lorenz96 { p, forcing },
        };
        let spec = ModelSpec::new(model, self.dt_internal, self.dt_obs).map_err(|e| problem("dt_obs", e.to_string()))?;
        let observation = observation_kind(&self.observation)
            .ok_or_else(|| problem("observation", format!("unknown observation layout {:?}", self.observation)))?;
        let p = &self.pipeline;
        let pipeline = match p.kind.as_str() {
            "esrf" => Pipeline::Esrf,
            "hybrid" => {
                let name = p.particle.as_deref().unwrap_or_default();
                let particle = particle_kind(name, p.lambda)
                    .ok_or_else(|| problem("pipeline.particle", format!("unknown particle filter {name:?}")))?;
                let alpha = p
                    .alpha
                    .ok_or_else(|| problem("pipeline.alpha", "required for hybrid pipelines".into()))?;
                let order = match p.order.as_deref() {
                    None | Some("particle_first") => HybridOrder::ParticleFirst,
                    Some("kalman_first") => HybridOrder::KalmanFirst,
                    Some(other) => return Err(problem("pipeline.order", format!("unknown order {other:?}"))),
                };
                Pipeline::Hybrid(BridgingConfig {
                    alpha,
                    particle,
                    order,
                })
            }
            name => Pipeline::Particle(
                particle_kind(name, p.lambda)
                    .ok_or_else(|| problem("pipeline.kind", format!("unknown pipeline {name:?}")))?,
            ),
        };
        let mut cfg = ExperimentConfig::new(spec, observation, self.members, pipeline, self.cycles);
        cfg.r_value = self.r;
        cfg.burn_in = self.burn_in;
        cfg.beta = self.beta;
        cfg.spin_up = self.spin_up;
        cfg.init_spread = self.init_spread;
        cfg.seeds = self.seeds.into();
        cfg.localization = self.localization.map(|l| LocalizationConfig {
            radius: l.radius,
            grid_size: spec.model.dim(),
        });
        let s = &self.solver;
        cfg.particle.sinkhorn.epsilon = s.sinkhorn_epsilon;
        cfg.particle.sinkhorn.max_iter = s.sinkhorn_max_iter;
        cfg.particle.second_order.riccati.dtau = s.riccati_dtau;
        cfg.particle.second_order.riccati.tol = s.riccati_tol;
        cfg.particle.second_order.riccati.max_steps = s.riccati_max_steps;
        cfg.particle.second_order.riccati.residual_target = s.riccati_residual_target;
        cfg.validate().map_err(|e| problem("config", e.to_string()))?;
        Ok(cfg)
    }
}

/// One experiment of a (possibly single-cell) sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub repetition: u64,
    pub settings: Settings,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub base: Settings,
    pub cells: Vec<Cell>,
}

/// Typed access to one table, recording problems under dotted keys.
struct Section<'a> {
    table: Option<&'a Table>,
    prefix: &'static str,
    problems: &'a mut Vec<Problem>,
}

impl<'a> Section<'a> {
    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn fail(&mut self, name: &str, message: impl Into<String>) {
        let key = self.key(name);
        self.problems.push(Problem {
            key,
            message: message.into(),
        });
    }

    fn check_keys(&mut self, allowed: &[&str]) {
        let Some(table) = self.table else { return };
        let unknown: Vec<String> = table.keys().filter(|k| !allowed.contains(&k.as_str())).cloned().collect();
        for k in unknown {
            self.fail(&k, "unknown key");
        }
    }

    fn raw(&self, name: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(name))
    }

    fn float(&mut self, name: &str) -> Option<f64> {
        match self.raw(name)? {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.fail(name, "expected a number");
                None
            }
        }
    }

    fn unsigned(&mut self, name: &str) -> Option<u64> {
        match self.raw(name)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            _ => {
                self.fail(name, "expected a non-negative integer");
                None
            }
        }
    }

    fn size(&mut self, name: &str) -> Option<usize> {
        self.unsigned(name).map(|v| v as usize)
    }

    fn string(&mut self, name: &str) -> Option<String> {
        match self.raw(name)? {
            Value::String(s) => Some(s.clone()),
            _ => {
                self.fail(name, "expected a string");
                None
            }
        }
    }

    fn boolean(&mut self, name: &str) -> Option<bool> {
        match self.raw(name)? {
            Value::Boolean(b) => Some(*b),
            _ => {
                self.fail(name, "expected true or false");
                None
            }
        }
    }

    fn list<T>(&mut self, name: &str, item: impl Fn(&Value) -> Option<T>, what: &str) -> Option<Vec<T>> {
        let value = self.raw(name)?;
        let Value::Array(items) = value else {
            self.fail(name, format!("expected an array of {what}"));
            return None;
        };
        if items.is_empty() {
            self.fail(name, "sweep axis must not be empty");
            return None;
        }
        let parsed: Option<Vec<T>> = items.iter().map(item).collect();
        if parsed.is_none() {
            self.fail(name, format!("expected an array of {what}"));
        }
        parsed
    }
}

fn subtable<'a>(root: &'a Table, name: &str, problems: &mut Vec<Problem>) -> Option<&'a Table> {
    match root.get(name) {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(_) => {
            problems.push(Problem {
                key: name.into(),
                message: "expected a table".into(),
            });
            None
        }
    }
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_size(v: &Value) -> Option<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Some(*i as usize),
        _ => None,
    }
}

fn as_string(v: &Value) -> Option<String> {
    v.as_str().map(str::to_string)
}

fn known_pipeline(name: &str) -> bool {
    name == "esrf" || name == "hybrid" || PARTICLE_KINDS.contains(&name)
}

fn check_alpha(problems: &mut Vec<Problem>, key: String, alpha: f64) {
    if !(0.0..=1.0).contains(&alpha) {
        problems.push(Problem {
            key,
            message: format!("alpha must lie in [0, 1], got {alpha}"),
        });
    }
}

fn check_lambda(problems: &mut Vec<Problem>, key: String, lambda: f64) {
    if !(lambda > 0.0) || !lambda.is_finite() {
        problems.push(Problem {
            key,
            message: format!("lambda must be positive, got {lambda}"),
        });
    }
}

#[derive(Debug, Default)]
struct Axes {
    pipeline: Option<Vec<String>>,
    members: Option<Vec<usize>>,
    alpha: Option<Vec<f64>>,
    lambda: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
    repetitions: u64,
    cap: usize,
}

fn read_axes(root: &Table, problems: &mut Vec<Problem>) -> Axes {
    let table = subtable(root, "sweep", problems);
    let mut s = Section {
        table,
        prefix: "sweep",
        problems,
    };
    s.check_keys(SWEEP_KEYS);
    let axes = Axes {
        pipeline: s.list("pipeline", as_string, "pipeline names"),
        members: s.list("members", as_size, "ensemble sizes"),
        alpha: s.list("alpha", as_float, "numbers"),
        lambda: s.list("lambda", as_float, "numbers"),
        beta: s.list("beta", as_float, "numbers"),
        repetitions: s.unsigned("repetitions").unwrap_or(1),
        cap: s.size("cap").unwrap_or(DEFAULT_SWEEP_CAP),
    };
    if axes.repetitions == 0 {
        s.fail("repetitions", "must be at least 1");
    }
    for (i, name) in axes.pipeline.iter().flatten().enumerate() {
        if !known_pipeline(name) {
            s.fail(&format!("pipeline[{i}]"), format!("unknown pipeline {name:?}"));
        }
    }
    for (i, &a) in axes.alpha.iter().flatten().enumerate() {
        check_alpha(s.problems, format!("sweep.alpha[{i}]"), a);
    }
    for (i, &l) in axes.lambda.iter().flatten().enumerate() {
        check_lambda(s.problems, format!("sweep.lambda[{i}]"), l);
    }
    for (i, &b) in axes.beta.iter().flatten().enumerate() {
        if !(b >= 0.0) || !b.is_finite() {
            s.fail(&format!("beta[{i}]"), format!("beta must be non-negative, got {b}"));
        }
    }
    axes
}

/// Parses and validates a configuration file, returning every cell of the
/// sweep it describes. `seed_offset` shifts every seed of every cell.
pub fn plan(text: &str, seed_offset: u64) -> Result<Plan, ConfigError> {
    let root: Table = toml::from_str(text).map_err(|e| ConfigError {
        problems: vec![Problem {
            key: String::new(),
            message: format!("not valid TOML: {}", e.message()),
        }],
    })?;
    let mut problems = Vec::new();
    let base = read_settings(&root, &mut problems);
    let axes = read_axes(&root, &mut problems);
    let Some(mut base) = base.filter(|_| problems.is_empty()) else {
        return Err(ConfigError { problems });
    };
    base.seeds = SeedSet::from(base.seeds).offset(seed_offset).into();

    let pipelines: Vec<Option<String>> = match &axes.pipeline {
        Some(v) => v.iter().cloned().map(Some).collect(),
        None => vec![None],
    };
    let wrap = |v: &Option<Vec<f64>>| -> Vec<Option<f64>> {
        v.as_ref().map_or(vec![None], |v| v.iter().copied().map(Some).collect())
    };
    let (alphas, lambdas, betas) = (wrap(&axes.alpha), wrap(&axes.lambda), wrap(&axes.beta));
    let members: Vec<Option<usize>> = axes.members.as_ref().map_or(vec![None], |v| v.iter().copied().map(Some).collect());
    let total = pipelines.len() as u128
        * members.len() as u128
        * alphas.len() as u128
        * lambdas.len() as u128
        * betas.len() as u128
        * axes.repetitions as u128;
    if total > axes.cap as u128 {
        return Err(ConfigError {
            problems: vec![Problem {
                key: "sweep".into(),
                message: format!("sweep has {total} cells, more than the cap of {}", axes.cap),
            }],
        });
    }

    let mut cells = Vec::with_capacity(total as usize);
    for pipeline in &pipelines {
        for &m in &members {
            for &alpha in &alphas {
                for &lambda in &lambdas {
                    for &beta in &betas {
                        for rep in 0..axes.repetitions {
                            let mut s = base.clone();
                            if let Some(p) = pipeline {
                                s.pipeline.kind = p.clone();
                            }
                            if let Some(m) = m {
                                s.members = m;
                            }
                            if alpha.is_some() {
                                s.pipeline.alpha = alpha;
                            }
                            if lambda.is_some() {
                                s.pipeline.lambda = lambda;
                            }
                            if let Some(b) = beta {
                                s.beta = b;
                            }
                            s.pipeline.normalize();
                            s.seeds = SeedSet::from(s.seeds).offset(rep).into();
                            let index = cells.len();
                            match s.to_experiment() {
                                Ok(experiment) => cells.push(Cell {
                                    index,
                                    repetition: rep,
                                    settings: s,
                                    experiment,
                                }),
                                Err(mut p) => {
                                    if total > 1 {
                                        p.message = format!("sweep cell {index} ({}): {}", s.pipeline.label(), p.message);
                                    }
                                    problems.push(p);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if !problems.is_empty() {
        problems.dedup();
        return Err(ConfigError { problems });
    }
    base.pipeline.normalize();
    Ok(Plan { base, cells })
}

fn read_settings(root: &Table, problems: &mut Vec<Problem>) -> Option<Settings> {
    let mut top = Section {
        table: Some(root),
        prefix: "",
        problems,
    };
    top.check_keys(TOP_KEYS);
    let model = top.string("model");
    if top.raw("model").is_none() {
        top.fail("model", "missing required key");
    }
    let members = top.size("members");
    if top.raw("members").is_none() {
        top.fail("members", "missing required key");
    }
    let cycles = top.size("cycles");
    if top.raw("cycles").is_none() {
        top.fail("cycles", "missing required key");
    }
    let burn_in = top.size("burn_in");
    let beta = top.float("beta").unwrap_or(0.2);
    let r = top.float("r").unwrap_or(8.0);
    let observation = top.string("observation");
    let dt_internal = top.float("dt_internal").unwrap_or(0.01);
    let dt_obs = top.float("dt_obs");
    let spin_up = top.size("spin_up").unwrap_or(1000);
    let init_spread = top.float("init_spread").unwrap_or(1.0);

    let is_l96 = match model.as_deref() {
        Some("lorenz63") => false,
        Some("lorenz96") => true,
        Some(other) => {
            top.fail("model", format!("unknown model {other:?}; expected \"lorenz63\" or \"lorenz96\""));
            false
        }
        None => false,
    };

    let params_table = subtable(root, "model_params", problems);
    let mut params = Section {
        table: params_table,
        prefix: "model_params",
        problems,
    };
    let model_params = if is_l96 {
        params.check_keys(&["p", "forcing"]);
        ModelParams::Lorenz96 {
            p: params.size("p").unwrap_or(40),
            forcing: params.float("forcing").unwrap_or(8.0),
        }
    } else {
        params.check_keys(&["sigma", "rho", "b"]);
        ModelParams::Lorenz63 {
            sigma: params.float("sigma").unwrap_or(10.0),
            rho: params.float("rho").unwrap_or(28.0),
            b: params.float("b").unwrap_or(8.0 / 3.0),
        }
    };

    let pipeline_table = subtable(root, "pipeline", problems);
    let mut pipe = Section {
        table: pipeline_table,
        prefix: "pipeline",
        problems,
    };
    pipe.check_keys(PIPELINE_KEYS);
    let kind = pipe.string("kind").unwrap_or_else(|| "esrf".into());
    if !known_pipeline(&kind) {
        pipe.fail("kind", format!("unknown pipeline {kind:?}"));
    }
    let lambda = pipe.float("lambda");
    let alpha = pipe.float("alpha");
    let particle = pipe.string("particle");
    if let Some(name) = &particle {
        if !PARTICLE_KINDS.contains(&name.as_str()) {
            pipe.fail("particle", format!("unknown particle filter {name:?}"));
        }
    }
    let order = pipe.string("order");
    if let Some(o) = &order {
        if o != "particle_first" && o != "kalman_first" {
            pipe.fail("order", format!("unknown order {o:?}; expected \"particle_first\" or \"kalman_first\""));
        }
    }
    if let Some(a) = alpha {
        check_alpha(pipe.problems, "pipeline.alpha".into(), a);
    }
    let pipeline = PipelineSettings {
        kind,
        lambda,
        alpha,
        particle,
        order,
    };
    if let Some(l) = lambda {
        if pipeline.uses_sinkhorn() {
            check_lambda(pipe.problems, "pipeline.lambda".into(), l);
        }
    }

    let loc_table = subtable(root, "localization", problems);
    let mut loc = Section {
        table: loc_table,
        prefix: "localization",
        problems,
    };
    loc.check_keys(LOCALIZATION_KEYS);
    let enabled = loc.boolean("enabled").unwrap_or(is_l96);
    let radius = loc.float("radius").unwrap_or(4.0);
    if enabled && !(radius > 0.0) {
        loc.fail("radius", format!("must be positive, got {radius}"));
    }
    let localization = enabled.then_some(LocalizationSettings { radius });

    let seeds_table = subtable(root, "seeds", problems);
    let mut seeds = Section {
        table: seeds_table,
        prefix: "seeds",
        problems,
    };
    seeds.check_keys(SEED_KEYS);
    let d = SeedSet::default();
    let seeds = SeedSettings {
        truth: seeds.unsigned("truth").unwrap_or(d.truth),
        obs_noise: seeds.unsigned("obs_noise").unwrap_or(d.obs_noise),
        init_ensemble: seeds.unsigned("init_ensemble").unwrap_or(d.init_ensemble),
        rejuvenation: seeds.unsigned("rejuvenation").unwrap_or(d.rejuvenation),
        random_rotations: seeds.unsigned("random_rotations").unwrap_or(d.random_rotations),
    };

    let solver_table = subtable(root, "solver", problems);
    let mut sol = Section {
        table: solver_table,
        prefix: "solver",
        problems,
    };
    sol.check_keys(SOLVER_KEYS);
    let d = SolverSettings::default();
    let solver = SolverSettings {
        sinkhorn_epsilon: sol.float("sinkhorn_epsilon").unwrap_or(d.sinkhorn_epsilon),
        sinkhorn_max_iter: sol.size("sinkhorn_max_iter").unwrap_or(d.sinkhorn_max_iter),
        riccati_dtau: sol.float("riccati_dtau").unwrap_or(d.riccati_dtau),
        riccati_tol: sol.float("riccati_tol").unwrap_or(d.riccati_tol),
        riccati_max_steps: sol.size("riccati_max_steps").unwrap_or(d.riccati_max_steps),
        riccati_residual_target: sol.float("riccati_residual_target").or(d.riccati_residual_target),
    };

    let (model, members, cycles) = (model?, members?, cycles?);
    let default_dt_obs = if is_l96 { 0.11 } else { 0.12 };
    Some(Settings {
        model,
        model_params,
        dt_internal,
        dt_obs: dt_obs.unwrap_or(default_dt_obs),
        observation: observation.unwrap_or_else(|| if is_l96 { "every_second" } else { "first_component" }.into()),
        r,
        members,
        cycles,
        burn_in: burn_in.unwrap_or(cycles / 10),
        beta,
        spin_up,
        init_spread,
        pipeline,
        localization,
        seeds,
        solver,
    })
}
