mod common;

use common::*;
use letf::dynamics::propagate;
use letf::harness::{assimilation_cycle, generate_truth_and_obs, initial_ensemble, rejuvenate, run_experiment, ExperimentConfig, Pipeline};
use letf::kalman::esrf_transform;
use letf::second_order::netf_delta;
use letf::transform::class_flags;
use letf::{
    apply_transform, collapse_transform, ensemble_moments, importance_weights, particle_transform, weighted_covariance,
    weighted_mean, Ensemble, ObservationModel, ObservationOperator, ParticleKind, ParticleOptions,
    SecondOrderMode, SecondOrderOptions, WeightVector,
};
use letf::second_order_transform;
use letf::transport::exact_ot;
use nalgebra::{DMatrix, DVector};

#[test]
fn four_member_transport_matches_vertex_enumeration() {
    let mut r = rng(17);
    for _ in 0..20 {
        let ens = random_ensemble(&mut r, 1, 4);
        let w = flat_dirichlet(&mut r, 4);
        let d = exact_ot(&ens, &w).unwrap();
        let cost = squared_distances(&ens);
        let ours = cost.component_mul(d.matrix()).sum() / 4.0;
        let oracle = brute_force_transport(&cost, w.as_slice());
        assert!((ours - oracle).abs() <= 1e-9 * oracle.max(1.0), "{ours} vs {oracle}");
    }
}

#[test]
fn weighted_covariance_dual_formulas_agree() {
    let mut r = rng(3);
    let ens = random_ensemble(&mut r, 3, 5);
    let w = flat_dirichlet(&mut r, 5);
    let wm = DMatrix::from_diagonal(w.as_vector()) - w.as_vector() * w.as_vector().transpose();
    let matrix_form = ens.states() * wm * ens.states().transpose();
    let sum_form = weighted_covariance_sum(&ens, &w);
    assert!((&matrix_form - &sum_form).amax() < 1e-12);
    assert!((weighted_covariance(&ens, &w).unwrap() - sum_form).amax() < 1e-12);
}

#[test]
fn netf_delta_squares_to_weighted_spread() {
    let w = WeightVector::from_slice(&[0.5, 0.3, 0.2]).unwrap();
    let delta = netf_delta(&w);
    let lhs = delta.matrix() * delta.matrix() / 3.0;
    assert!((lhs - w.spread_matrix()).amax() < 1e-10);
}

#[test]
fn optimal_rotation_beats_random_rotations() {
    let mut r = rng(99);
    let ens = random_ensemble(&mut r, 3, 3);
    let w = random_weights(&mut r, &ens);
    let opt = second_order_transform(None, &w, &ens, SecondOrderMode::NetfOptimal, &SecondOrderOptions::default())
        .unwrap();
    let j_opt = displacement(&ens, opt.matrix());
    let base = collapse_transform(&w);
    let delta = netf_delta(&w);
    for _ in 0..1000 {
        let q = random_mean_preserving_orthogonal(&mut r, 3);
        assert!(j_opt <= displacement(&ens, &(&base + delta.matrix() * q)) + 1e-9);
    }
}

#[test]
fn corrected_two_point_transport_is_second_order() {
    let ens = Ensemble::from_scalars(&[0.0, 1.0]).unwrap();
    let w = WeightVector::from_slice(&[0.75, 0.25]).unwrap();
    let d = particle_transform(&ens, &w, ParticleKind::Etpf2Exact, 0, &ParticleOptions::default()).unwrap();
    assert!(class_flags(d.matrix(), &w).in_d2);
    let (_, cov) = ensemble_moments(&apply_transform(&ens, &d).unwrap());
    assert!((cov[(0, 0)] - 0.1875).abs() < 1e-4);
}

#[test]
fn analysis_stays_in_affine_hull_when_members_are_few() {
    let mut r = rng(8);
    let ens = random_ensemble(&mut r, 6, 4);
    let w = random_weights(&mut r, &ens);
    let z = ens.states();
    let base = z.column(0).into_owned();
    let span = DMatrix::from_fn(6, 3, |i, j| z[(i, j + 1)] - base[i]);
    let svd = span.svd(true, false);
    let u = svd.u.unwrap();
    let opts = ParticleOptions::default();
    for kind in [ParticleKind::EtpfExact, ParticleKind::Etpf2Exact, ParticleKind::NetfOptimal, ParticleKind::NetfRandom] {
        let za = apply_transform(&ens, &particle_transform(&ens, &w, kind, 5, &opts).unwrap()).unwrap();
        for j in 0..4 {
            let v = za.states().column(j) - &base;
            let residual = &v - &u * (u.transpose() * &v);
            assert!(residual.amax() <= 1e-8, "{} member {j}", kind.name());
        }
    }
}

#[test]
fn etkf_matches_kalman_update_in_three_dimensions() {
    let mut r = rng(21);
    let ens = random_ensemble(&mut r, 3, 7);
    let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let rm = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0]));
    let obs = ObservationModel::new(ObservationOperator::Matrix(h.clone()), rm.clone()).unwrap();
    let y = DVector::from_vec(vec![0.4, -1.1]);

    let m = ens.size() as f64;
    let a = ens.anomalies();
    let p = &a * a.transpose() / (m - 1.0);
    let s = &h * &p * h.transpose() + &rm;
    let k = &p * h.transpose() * s.try_inverse().unwrap();
    let mean = ens.mean() + &k * (&y - &h * ens.mean());
    let cov = (DMatrix::identity(3, 3) - &k * &h) * &p;

    let d = esrf_transform(&ens, &y, &obs, 1.0, None).unwrap();
    let za = apply_transform(&ens, &d).unwrap();
    let aa = za.anomalies();
    assert!((za.mean() - mean).amax() < 1e-8);
    assert!((&aa * aa.transpose() / (m - 1.0) - cov).amax() < 1e-8);
}

#[test]
fn rejuvenation_noise_has_forecast_spread() {
    let values = [-1.3, -0.4, 0.0, 0.2, 0.5, 0.9, 1.4, 2.0, 2.2, 3.1];
    let forecast = Ensemble::from_scalars(&values).unwrap();
    let (_, target) = mean_and_unbiased_variance(&values);
    let beta: f64 = 0.2;
    let mut r = rng(12345);
    let draws = 100_000;
    let mut sum_sq = vec![0.0; values.len()];
    for _ in 0..draws {
        let out = rejuvenate(&forecast, &forecast, beta, &mut r).unwrap();
        for (j, s) in sum_sq.iter_mut().enumerate() {
            *s += (out.states()[(0, j)] - values[j]).powi(2);
        }
    }
    for s in sum_sq {
        let var = s / draws as f64;
        assert!((var / (beta * beta * target) - 1.0).abs() < 0.02, "{var}");
    }
}

#[test]
fn esrf_tracks_lorenz63_with_precise_observations() {
    let mut cfg = ExperimentConfig::lorenz63(20, Pipeline::Esrf, 2000);
    cfg.r_value = 1e-2;
    let report = run_experiment(&cfg).unwrap();
    assert!(report.rmse < 0.5, "rmse {}", report.rmse);
}

#[test]
fn analysis_mean_equals_weighted_forecast_mean_every_cycle() {
    let kinds = [
        ParticleKind::EtpfExact,
        ParticleKind::EtpfSinkhorn { lambda: 10.0 },
        ParticleKind::Etpf2Exact,
        ParticleKind::Etpf2Sinkhorn { lambda: 10.0 },
        ParticleKind::NetfOptimal,
        ParticleKind::NetfSymmetric,
        ParticleKind::NetfRandom,
    ];
    for kind in kinds {
        let cfg = ExperimentConfig::lorenz63(15, Pipeline::Particle(kind), 30);
        let twin = generate_truth_and_obs(&cfg).unwrap();
        let obs = cfg.observation_model().unwrap();
        let mut rj = rng(cfg.seeds.rejuvenation);
        let mut ens = initial_ensemble(&twin.truth[0], 15, 1.0, cfg.seeds.init_ensemble).unwrap();
        for cycle in 1..=cfg.cycles {
            let forecast = propagate(&ens, &cfg.spec).unwrap();
            let y = &twin.observations[cycle - 1];
            let w = importance_weights(&forecast, y, &obs).unwrap();
            let analysis = assimilation_cycle(&forecast, y, &obs, &cfg, cycle as u64).unwrap();
            let err = (analysis.mean() - weighted_mean(&forecast, &w).unwrap()).amax();
            assert!(err <= 1e-6, "{} cycle {cycle}: {err:.2e}", kind.name());
            ens = rejuvenate(&analysis, &forecast, cfg.beta, &mut rj).unwrap();
        }
    }
}
