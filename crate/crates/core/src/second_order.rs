//! Second-order corrections `D^ = D + Delta` of first-order accurate
//! transforms.
//!
//! A correction makes the biased analysis covariance equal the importance
//! sampling estimate `Z^f (W - w w^T) Z^f^T`. Three constructions are
//! provided:
//!
//! * the NETF square root `Delta = sqrt(M) (W - w w^T)^{1/2}` on top of the
//!   collapse transform `w 1^T`, optionally rotated by a mean-preserving
//!   orthogonal matrix (identity, seeded random, or the rotation minimising
//!   member displacement);
//! * the symmetric solution of the algebraic Riccati equation
//!   `A = B Delta + Delta B^T + Delta Delta`, with `B = D - w 1^T` and
//!   `A = M (W - w w^T) - B B^T`, obtained by explicit Euler integration of
//!   the matrix flow `dDelta/dtau = A - B Delta - Delta B^T - Delta Delta`
//!   started from zero.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ensemble::{CovarianceConvention, Ensemble, WeightVector};
use crate::error::{FilterError, Result};
use crate::linalg::{
    complement_basis, embed_on_complement, max_abs, polar_factor, project_centered, psd_sqrt,
    symmetrize,
};
use crate::transform::{
    class_flags, collapse_transform, column_sum_error, mean_condition_error, TransformMatrix,
    MARGINAL_TOLERANCE,
};

/// Entrywise threshold beyond which the Riccati flow counts as diverged.
const DIVERGENCE_BOUND: f64 = 1e6;

/// Symmetric correction with `Delta 1 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionMatrix {
    delta: DMatrix<f64>,
}

impl CorrectionMatrix {
    pub fn new(delta: DMatrix<f64>) -> Self {
        Self { delta }
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            delta: DMatrix::zeros(m, m),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.delta
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.delta
    }

    pub fn size(&self) -> usize {
        self.delta.nrows()
    }

    pub fn symmetry_error(&self) -> f64 {
        (&self.delta - self.delta.transpose()).amax()
    }

    /// `max(|Delta 1|, |Delta^T 1|)`.
    pub fn centering_error(&self) -> f64 {
        let rows = self.delta.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max);
        let cols = self.delta.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max);
        rows.max(cols)
    }
}

fn target_spread(w: &WeightVector, convention: CovarianceConvention) -> DMatrix<f64> {
    let m = w.len();
    w.spread_matrix() * (m as f64 * convention.factor(m))
}

/// NETF square root `sqrt(M) (W - w w^T)^{1/2}`.
pub fn netf_delta(w: &WeightVector) -> CorrectionMatrix {
    netf_delta_with(w, CovarianceConvention::Biased)
}

pub fn netf_delta_with(w: &WeightVector, convention: CovarianceConvention) -> CorrectionMatrix {
    let root = psd_sqrt(&target_spread(w, convention));
    // `1` spans a null direction; remove the round-off the eigensolver leaves in it.
    CorrectionMatrix::new(symmetrize(&project_centered(&root)))
}

/// Relative size below which a singular value of the rotation problem is
/// treated as zero.
const NULL_SINGULAR_VALUE: f64 = 1e-10;

/// Mean-preserving orthogonal `Q` minimising `(1/M) sum |z_i^a - z_i^f|^2`
/// for `D = w 1^T + Delta Q`.
///
/// The problem is solved on the complement of `1`, where
/// `S = Delta Zhat^T Zhat` acts; null singular directions are matched by the
/// orthogonal map closest to the identity, so `Delta = 0` yields `Q = I`.
pub fn optimal_rotation(delta: &CorrectionMatrix, ens: &Ensemble) -> Result<DMatrix<f64>> {
    let m = delta.size();
    if ens.size() != m {
        return Err(FilterError::DimensionMismatch {
            context: "correction vs ensemble members",
            expected: m,
            actual: ens.size(),
        });
    }
    let anomalies = ens.anomalies();
    let gram = anomalies.tr_mul(&anomalies);
    let s = delta.matrix() * gram;
    if s.iter().any(|x| !x.is_finite()) {
        return Err(FilterError::SvdFailed);
    }
    let basis = complement_basis(m);
    let reduced = basis.tr_mul(&s) * &basis;
    let svd = reduced.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(FilterError::SvdFailed),
    };
    let v = v_t.transpose();
    let sigma_max = svd.singular_values.max();
    let threshold = NULL_SINGULAR_VALUE * sigma_max;
    let (range, null): (Vec<usize>, Vec<usize>) =
        (0..m - 1).partition(|&k| sigma_max > 0.0 && svd.singular_values[k] > threshold);

    let mut inner = DMatrix::zeros(m - 1, m - 1);
    for &k in &range {
        inner.ger(1.0, &u.column(k), &v.column(k), 1.0);
    }
    if !null.is_empty() {
        let nu = u.select_columns(&null);
        let nv = v.select_columns(&null);
        let align = polar_factor(&nu.tr_mul(&nv))?;
        inner += nu * align * nv.transpose();
    }
    Ok(embed_on_complement(&inner, &basis))
}

/// Haar-distributed orthogonal matrix with `Q 1 = 1`, deterministic in `seed`.
pub fn random_mean_preserving_rotation(m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = m - 1;
    let g = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    embed_on_complement(&q, &complement_basis(m))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiOptions {
    pub dtau: f64,
    /// Stop once `|Delta_{k+1} - Delta_k|_inf <= tol` (max-abs entry).
    pub tol: f64,
    pub max_steps: usize,
    /// Optional bound on the returned residual `|R(Delta)|_inf`; the flow
    /// keeps stepping past the step-size rule until it is met.
    pub residual_target: Option<f64>,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            dtau: 0.1,
            tol: 1e-3,
            max_steps: 10_000,
            residual_target: None,
        }
    }
}

/// Coefficients `A`, `B` of the Riccati equation for a first-order transform.
#[derive(Debug, Clone)]
pub struct RiccatiProblem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl RiccatiProblem {
    pub fn new(d: &DMatrix<f64>, w: &WeightVector) -> Result<Self> {
        Self::with_convention(d, w, CovarianceConvention::Biased)
    }

    pub fn with_convention(
        d: &DMatrix<f64>,
        w: &WeightVector,
        convention: CovarianceConvention,
    ) -> Result<Self> {
        let m = w.len();
        if d.nrows() != m || d.ncols() != m {
            return Err(FilterError::DimensionMismatch {
                context: "transform vs weights",
                expected: m,
                actual: d.nrows(),
            });
        }
        let err = column_sum_error(d).max(mean_condition_error(d, w));
        if err > MARGINAL_TOLERANCE {
            return Err(FilterError::NotFirstOrder(err));
        }
        let b = d - collapse_transform(w);
        let a = symmetrize(&(target_spread(w, convention) - &b * b.transpose()));
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `R(Delta) = A - B Delta - Delta B^T - Delta Delta` for symmetric Delta.
    pub fn residual(&self, delta: &DMatrix<f64>) -> DMatrix<f64> {
        let bd = &self.b * delta;
        let mut r = &self.a - &bd - bd.transpose();
        r.gemm(-1.0, delta, delta, 1.0);
        r
    }
}

/// Explicit Euler integration of the Riccati matrix flow.
#[derive(Debug, Clone)]
pub struct RiccatiFlow {
    problem: RiccatiProblem,
    delta: DMatrix<f64>,
    residual: DMatrix<f64>,
    bd: DMatrix<f64>,
    dd: DMatrix<f64>,
    dtau: f64,
    steps: usize,
}

impl RiccatiFlow {
    /// Starts the flow at `Delta(0) = 0`.
    pub fn new(problem: RiccatiProblem, dtau: f64) -> Self {
        let m = problem.a.nrows();
        let residual = problem.a.clone();
        Self {
            problem,
            delta: DMatrix::zeros(m, m),
            residual,
            bd: DMatrix::zeros(m, m),
            dd: DMatrix::zeros(m, m),
            dtau,
            steps: 0,
        }
    }

    /// Advances one step; returns `|Delta_{k+1} - Delta_k|_inf`.
    ///
    /// The increment uses the symmetric part of the residual, which equals
    /// symmetrising the iterate after a plain Euler step.
    pub fn step(&mut self) -> Result<f64> {
        let m = self.delta.nrows();
        let mut change: f64 = 0.0;
        for j in 0..m {
            for i in 0..=j {
                let inc = self.dtau * 0.5 * (self.residual[(i, j)] + self.residual[(j, i)]);
                change = change.max(inc.abs());
                self.delta[(i, j)] += inc;
                if i != j {
                    self.delta[(j, i)] = self.delta[(i, j)];
                }
            }
        }
        self.steps += 1;
        let bound = max_abs(&self.delta);
        if !bound.is_finite() || bound > DIVERGENCE_BOUND {
            return Err(FilterError::RiccatiDiverged { steps: self.steps });
        }
        self.update_residual();
        Ok(change)
    }

    fn update_residual(&mut self) {
        let m = self.delta.nrows();
        self.bd.gemm(1.0, &self.problem.b, &self.delta, 0.0);
        self.dd.gemm(1.0, &self.delta, &self.delta, 0.0);
        let a = &self.problem.a;
        for j in 0..m {
            for i in 0..m {
                self.residual[(i, j)] = a[(i, j)] - self.bd[(i, j)] - self.bd[(j, i)] - self.dd[(i, j)];
            }
        }
    }

    pub fn delta(&self) -> &DMatrix<f64> {
        &self.delta
    }

    /// `|R(Delta_k)|_inf` at the current iterate.
    pub fn residual_norm(&self) -> f64 {
        self.residual.amax()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn problem(&self) -> &RiccatiProblem {
        &self.problem
    }
}

/// Riccati correction together with its convergence certificate.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub delta: CorrectionMatrix,
    pub steps: usize,
    /// `|A - B Delta - Delta B^T - Delta Delta|_inf` at the returned Delta.
    pub residual: f64,
}

/// Symmetric correction turning the first-order transform `d` into a
/// second-order accurate one.
///
/// Returns once the step-size rule holds and the residual is within
/// `10 tol` (and within `residual_target`, if set).
pub fn riccati_correction(
    d: &TransformMatrix,
    w: &WeightVector,
    options: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    riccati_correction_with(d.matrix(), w, options, CovarianceConvention::Biased)
}

pub fn riccati_correction_with(
    d: &DMatrix<f64>,
    w: &WeightVector,
    options: &RiccatiOptions,
    convention: CovarianceConvention,
) -> Result<RiccatiSolution> {
    if !(options.dtau > 0.0) || !(options.tol > 0.0) {
        return Err(FilterError::InvalidParameter(
            "Riccati step size and tolerance must be positive".into(),
        ));
    }
    let problem = RiccatiProblem::with_convention(d, w, convention)?;
    let mut flow = RiccatiFlow::new(problem, options.dtau);
    let bound = options
        .residual_target
        .map_or(10.0 * options.tol, |t| t.min(10.0 * options.tol));
    loop {
        if flow.steps() >= options.max_steps {
            return Err(FilterError::RiccatiNotConverged {
                steps: flow.steps(),
                step_norm: options.dtau * flow.residual_norm(),
                residual: flow.residual_norm(),
            });
        }
        let step = flow.step()?;
        if step <= options.tol && flow.residual_norm() <= bound {
            break;
        }
    }
    Ok(RiccatiSolution {
        residual: flow.residual_norm(),
        steps: flow.steps(),
        delta: CorrectionMatrix::new(flow.delta),
    })
}

/// Which second-order correction to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondOrderMode {
    /// `D + Delta` with `Delta` from the Riccati flow.
    Riccati,
    /// `w 1^T + Delta_netf Q_opt`.
    NetfOptimal,
    /// `w 1^T + Delta_netf`.
    NetfSymmetric,
    /// `w 1^T + Delta_netf Q` with a seeded random mean-preserving `Q`.
    NetfRandom { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondOrderOptions {
    pub riccati: RiccatiOptions,
    pub convention: CovarianceConvention,
    /// Entrywise tolerance of the final second-order certificate.
    pub certificate_tolerance: f64,
}

impl Default for SecondOrderOptions {
    fn default() -> Self {
        Self {
            riccati: RiccatiOptions {
                residual_target: Some(5e-7),
                max_steps: 200_000,
                ..RiccatiOptions::default()
            },
            convention: CovarianceConvention::Biased,
            certificate_tolerance: crate::transform::COVARIANCE_TOLERANCE,
        }
    }
}

/// Second-order accurate transform. `base` is the first-order transform to
/// correct in [`SecondOrderMode::Riccati`] and is ignored by the NETF modes,
/// which start from `w 1^T`.
pub fn second_order_transform(
    base: Option<&TransformMatrix>,
    w: &WeightVector,
    ens: &Ensemble,
    mode: SecondOrderMode,
    options: &SecondOrderOptions,
) -> Result<TransformMatrix> {
    let m = w.len();
    if ens.size() != m {
        return Err(FilterError::DimensionMismatch {
            context: "weights vs ensemble members",
            expected: ens.size(),
            actual: m,
        });
    }
    let d = match mode {
        SecondOrderMode::Riccati => {
            let base = base.ok_or_else(|| {
                FilterError::InvalidParameter("Riccati correction needs a base transform".into())
            })?;
            let sol = riccati_correction_with(base.matrix(), w, &options.riccati, options.convention)?;
            base.matrix() + sol.delta.matrix()
        }
        SecondOrderMode::NetfOptimal | SecondOrderMode::NetfSymmetric | SecondOrderMode::NetfRandom { .. } => {
            let delta = netf_delta_with(w, options.convention);
            let rotated = match mode {
                SecondOrderMode::NetfOptimal => delta.matrix() * optimal_rotation(&delta, ens)?,
                SecondOrderMode::NetfRandom { seed } => {
                    delta.matrix() * random_mean_preserving_rotation(m, seed)
                }
                _ => delta.into_matrix(),
            };
            collapse_transform(w) + rotated
        }
    };
    certify(d, w, options)
}

fn certify(d: DMatrix<f64>, w: &WeightVector, options: &SecondOrderOptions) -> Result<TransformMatrix> {
    let first = column_sum_error(&d).max(mean_condition_error(&d, w));
    if first > MARGINAL_TOLERANCE {
        return Err(FilterError::NotFirstOrder(first));
    }
    let b = &d - collapse_transform(w);
    let err = (&b * b.transpose() - target_spread(w, options.convention)).amax();
    if err > options.certificate_tolerance {
        return Err(FilterError::NotSecondOrder(err));
    }
    let transform = TransformMatrix::classify(d, w)?;
    debug_assert!(
        options.convention != CovarianceConvention::Biased || class_flags(transform.matrix(), w).in_d2
    );
    Ok(transform)
}

/// Weighted mean of the analysis produced by `d`, used by consistency checks.
pub fn analysis_mean(ens: &Ensemble, d: &DMatrix<f64>) -> DVector<f64> {
    (ens.states() * d).column_mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::mean_squared_displacement;
    use crate::transport::exact_ot;

    fn ident(m: usize) -> DMatrix<f64> {
        DMatrix::identity(m, m)
    }

    #[test]
    fn netf_delta_uniform_is_centering_projection() {
        let m = 5;
        let delta = netf_delta(&WeightVector::uniform(m));
        let p = ident(m) - DMatrix::from_element(m, m, 1.0 / m as f64);
        assert!((delta.matrix() - &p).amax() < 1e-12);
        let d = collapse_transform(&WeightVector::uniform(m)) + delta.matrix();
        assert!((d - ident(m)).amax() < 1e-12);
    }

    #[test]
    fn netf_delta_unit_weight_is_zero() {
        let delta = netf_delta(&WeightVector::unit(4, 2));
        assert!(delta.matrix().amax() < 1e-14);
    }

    #[test]
    fn netf_delta_recomposes() {
        let w = WeightVector::from_slice(&[0.5, 0.3, 0.2]).unwrap();
        let delta = netf_delta(&w);
        let recomposed = delta.matrix() * delta.matrix() / 3.0;
        assert!((recomposed - w.spread_matrix()).amax() < 1e-10);
        assert!(delta.symmetry_error() < 1e-15);
        assert!(delta.centering_error() < 1e-14);
    }

    #[test]
    fn zero_delta_rotation_is_identity() {
        let ens = Ensemble::from_members(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
        let q = optimal_rotation(&CorrectionMatrix::zeros(3), &ens).unwrap();
        assert!((q - ident(3)).amax() < 1e-12);
    }

    #[test]
    fn optimal_rotation_uniform_weights() {
        let ens = Ensemble::from_members(&[
            vec![0.0, 1.0, 0.2],
            vec![2.0, 0.0, -1.0],
            vec![1.0, 3.0, 0.5],
            vec![-1.0, 0.4, 2.0],
        ])
        .unwrap();
        let w = WeightVector::uniform(4);
        let delta = netf_delta(&w);
        let q = optimal_rotation(&delta, &ens).unwrap();
        assert!((q.transpose() * &q - ident(4)).amax() < 1e-10);
        let d = collapse_transform(&w) + delta.matrix() * q;
        assert!(class_flags(&d, &w).in_d2);
        // The identity analysis displaces no member, so it must be the optimum.
        assert!(mean_squared_displacement(&ens, &d) < 1e-12);
    }

    #[test]
    fn random_rotation_is_reproducible_and_mean_preserving() {
        let a = random_mean_preserving_rotation(6, 42);
        let b = random_mean_preserving_rotation(6, 42);
        assert_eq!(a, b);
        assert!((a.transpose() * &a - ident(6)).amax() < 1e-12);
        let ones = DVector::from_element(6, 1.0);
        assert!((&a * &ones - &ones).amax() < 1e-12);
        assert_ne!(a, random_mean_preserving_rotation(6, 43));
    }

    #[test]
    fn riccati_stationary_for_second_order_base() {
        let w = WeightVector::uniform(4);
        let d = TransformMatrix::classify(ident(4), &w).unwrap();
        let sol = riccati_correction(&d, &w, &RiccatiOptions::default()).unwrap();
        assert_eq!(sol.steps, 1);
        assert!(sol.delta.matrix().amax() < 1e-15);
    }

    #[test]
    fn riccati_from_collapse_recovers_square_root() {
        let w = WeightVector::from_slice(&[0.4, 0.3, 0.2, 0.1]).unwrap();
        let d0 = TransformMatrix::classify(collapse_transform(&w), &w).unwrap();
        let opts = RiccatiOptions {
            residual_target: Some(1e-6),
            ..RiccatiOptions::default()
        };
        let sol = riccati_correction(&d0, &w, &opts).unwrap();
        let spread = sol.delta.matrix() * sol.delta.matrix().transpose() / 4.0;
        assert!((spread - w.spread_matrix()).amax() < 1e-4);
        assert!(class_flags(&(d0.matrix() + sol.delta.matrix()), &w).in_d2);
    }

    #[test]
    fn riccati_two_point_etpf() {
        let ens = Ensemble::from_scalars(&[0.0, 1.0]).unwrap();
        let w = WeightVector::from_slice(&[0.75, 0.25]).unwrap();
        let d = exact_ot(&ens, &w).unwrap();
        let out = second_order_transform(Some(&d), &w, &ens, SecondOrderMode::Riccati, &SecondOrderOptions::default())
            .unwrap();
        assert!(out.flags().in_d2);
        let za = ens.states() * out.matrix();
        let mean = za.mean();
        let var = za.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0;
        // Weighted variance of {0, 1} with weights (0.75, 0.25).
        assert!((var - 0.1875).abs() < 1e-4);
    }

    #[test]
    fn riccati_rejects_non_first_order_base() {
        let w = WeightVector::from_slice(&[0.75, 0.25]).unwrap();
        let d = TransformMatrix::classify(ident(2), &w).unwrap();
        assert!(matches!(
            riccati_correction(&d, &w, &RiccatiOptions::default()),
            Err(FilterError::NotFirstOrder(_))
        ));
    }

    #[test]
    fn riccati_step_limit() {
        let w = WeightVector::from_slice(&[0.4, 0.3, 0.2, 0.1]).unwrap();
        let d0 = TransformMatrix::classify(collapse_transform(&w), &w).unwrap();
        let opts = RiccatiOptions {
            max_steps: 2,
            ..RiccatiOptions::default()
        };
        assert!(matches!(
            riccati_correction(&d0, &w, &opts),
            Err(FilterError::RiccatiNotConverged { steps: 2, .. })
        ));
    }

    #[test]
    fn netf_symmetric_uniform_is_identity() {
        let ens = Ensemble::from_scalars(&[0.0, 1.0, 2.0]).unwrap();
        let w = WeightVector::uniform(3);
        let d = second_order_transform(None, &w, &ens, SecondOrderMode::NetfSymmetric, &SecondOrderOptions::default())
            .unwrap();
        assert!((d.matrix() - ident(3)).amax() < 1e-12);
    }

    #[test]
    fn unbiased_convention_scales_the_spread() {
        let ens = Ensemble::from_members(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
        let w = WeightVector::from_slice(&[0.5, 0.3, 0.2]).unwrap();
        let opts = SecondOrderOptions {
            convention: CovarianceConvention::Unbiased,
            ..SecondOrderOptions::default()
        };
        let d = second_order_transform(None, &w, &ens, SecondOrderMode::NetfSymmetric, &opts).unwrap();
        let b = d.matrix() - collapse_transform(&w);
        let target = w.spread_matrix() * (3.0 * 1.5);
        assert!((&b * b.transpose() - target).amax() < 1e-10);
    }
}
