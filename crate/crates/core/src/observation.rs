//! Observation operators, Gaussian likelihoods and importance weights.

use nalgebra::{Cholesky, DMatrix, DVector, DVectorView, Dyn};

use crate::ensemble::{Ensemble, WeightVector};
use crate::error::{FilterError, Result};

/// Linear observation operator.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationOperator {
    /// Picks the listed state components (0-based).
    Selection(Vec<usize>),
    /// Dense `N_y x N_z` matrix.
    Matrix(DMatrix<f64>),
}

/// Observation operator `h`, error covariance `R` and its factorisation.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    operator: ObservationOperator,
    r: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    r_inv: DMatrix<f64>,
}

impl ObservationModel {
    pub fn new(operator: ObservationOperator, r: DMatrix<f64>) -> Result<Self> {
        let ny = match &operator {
            ObservationOperator::Selection(idx) => idx.len(),
            ObservationOperator::Matrix(h) => h.nrows(),
        };
        if r.nrows() != ny || r.ncols() != ny {
            return Err(FilterError::DimensionMismatch {
                context: "observation covariance",
                expected: ny,
                actual: r.nrows(),
            });
        }
        if (&r - r.transpose()).amax() > 1e-12 || r.iter().any(|x| !x.is_finite()) {
            return Err(FilterError::InvalidCovariance);
        }
        let chol = Cholesky::new(r.clone()).ok_or(FilterError::InvalidCovariance)?;
        let r_inv = chol.inverse();
        Ok(Self {
            operator,
            r,
            chol,
            r_inv,
        })
    }

    /// Observes `indices` with independent errors of variance `variance`.
    pub fn selection(indices: Vec<usize>, variance: f64) -> Result<Self> {
        let ny = indices.len();
        Self::new(
            ObservationOperator::Selection(indices),
            DMatrix::from_diagonal_element(ny, ny, variance),
        )
    }

    pub fn operator(&self) -> &ObservationOperator {
        &self.operator
    }

    /// Observed component indices for selection operators.
    pub fn observed_indices(&self) -> Option<&[usize]> {
        match &self.operator {
            ObservationOperator::Selection(idx) => Some(idx),
            ObservationOperator::Matrix(_) => None,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    /// Lower Cholesky factor of `R`.
    pub fn covariance_sqrt(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn is_diagonal(&self) -> bool {
        self.r
            .iter()
            .enumerate()
            .all(|(k, x)| k % (self.r.nrows() + 1) == 0 || *x == 0.0)
    }

    fn check_state(&self, n: usize) -> Result<()> {
        match &self.operator {
            ObservationOperator::Selection(idx) => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                    return Err(FilterError::DimensionMismatch {
                        context: "observed index vs state dimension",
                        expected: n,
                        actual: bad,
                    });
                }
            }
            ObservationOperator::Matrix(h) => {
                if h.ncols() != n {
                    return Err(FilterError::DimensionMismatch {
                        context: "observation matrix columns",
                        expected: n,
                        actual: h.ncols(),
                    });
                }
            }
        }
        Ok(())
    }

    /// `h(z)`.
    pub fn apply(&self, z: DVectorView<'_, f64>) -> DVector<f64> {
        match &self.operator {
            ObservationOperator::Selection(idx) => {
                DVector::from_iterator(idx.len(), idx.iter().map(|&i| z[i]))
            }
            ObservationOperator::Matrix(h) => h * z,
        }
    }

    /// `h` applied to every member: an `N_y x M` matrix.
    pub fn apply_ensemble(&self, ens: &Ensemble) -> Result<DMatrix<f64>> {
        self.check_state(ens.dim())?;
        Ok(match &self.operator {
            ObservationOperator::Selection(idx) => {
                DMatrix::from_fn(idx.len(), ens.size(), |r, j| ens.states()[(idx[r], j)])
            }
            ObservationOperator::Matrix(h) => h * ens.states(),
        })
    }

    /// `(h(z) - y)^T R^{-1} (h(z) - y)` for a precomputed innovation.
    pub fn mahalanobis(&self, innovation: &DVector<f64>) -> f64 {
        let solved = self.chol.solve(innovation);
        innovation.dot(&solved)
    }

    pub(crate) fn check_obs(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.obs_dim() {
            return Err(FilterError::DimensionMismatch {
                context: "observation vector",
                expected: self.obs_dim(),
                actual: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("observation vector".into()));
        }
        Ok(())
    }

    /// Gaussian log-likelihoods `-1/2 (h(z_i) - y)^T R^{-1} (h(z_i) - y)`,
    /// without the normalising constant.
    pub fn log_likelihoods(&self, ens: &Ensemble, y: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_obs(y)?;
        let hz = self.apply_ensemble(ens)?;
        Ok(hz
            .column_iter()
            .map(|c| -0.5 * self.mahalanobis(&(c - y)))
            .collect())
    }

    /// Log-likelihoods with `R^{-1}` replaced by `T^{1/2} R^{-1} T^{1/2}`,
    /// `T = diag(taper)`. A unit taper reproduces [`Self::log_likelihoods`]
    /// up to round-off.
    pub fn tapered_log_likelihoods(
        &self,
        ens: &Ensemble,
        y: &DVector<f64>,
        taper: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_obs(y)?;
        let precision = self.tapered_precision(taper)?;
        let hz = self.apply_ensemble(ens)?;
        Ok(hz
            .column_iter()
            .map(|c| {
                let d = c - y;
                -0.5 * d.dot(&(&precision * &d))
            })
            .collect())
    }

    /// `T^{1/2} R^{-1} T^{1/2}` for non-negative taper values.
    pub fn tapered_precision(&self, taper: &[f64]) -> Result<DMatrix<f64>> {
        if taper.len() != self.obs_dim() {
            return Err(FilterError::DimensionMismatch {
                context: "taper weights",
                expected: self.obs_dim(),
                actual: taper.len(),
            });
        }
        if taper.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(FilterError::InvalidParameter("taper weights must be finite and non-negative".into()));
        }
        let roots: Vec<f64> = taper.iter().map(|t| t.sqrt()).collect();
        Ok(DMatrix::from_fn(self.obs_dim(), self.obs_dim(), |i, j| {
            roots[i] * self.r_inv[(i, j)] * roots[j]
        }))
    }
}

/// Normalised importance weights of `ens` given the observation `y`.
pub fn importance_weights(
    ens: &Ensemble,
    y: &DVector<f64>,
    obs: &ObservationModel,
) -> Result<WeightVector> {
    WeightVector::from_log_weights(&obs.log_likelihoods(ens, y)?)
}

/// Importance weights from a user-supplied log-likelihood.
pub fn importance_weights_with<F>(ens: &Ensemble, mut log_likelihood: F) -> Result<WeightVector>
where
    F: FnMut(DVectorView<'_, f64>) -> f64,
{
    let logs: Vec<f64> = (0..ens.size()).map(|j| log_likelihood(ens.member(j))).collect();
    WeightVector::from_log_weights(&logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_gaussian_weights() {
        let ens = Ensemble::from_scalars(&[0.0, 1.0]).unwrap();
        let obs = ObservationModel::selection(vec![0], 1.0).unwrap();
        let w = importance_weights(&ens, &DVector::from_element(1, 0.0), &obs).unwrap();
        let e = (-0.5f64).exp();
        assert!((w.as_slice()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((w.as_slice()[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((w.as_slice()[0] - 0.62246).abs() < 1e-5);
    }

    #[test]
    fn identical_predictions_give_uniform_weights() {
        let ens = Ensemble::from_members(&[vec![1.0, 5.0], vec![1.0, -2.0], vec![1.0, 9.0]]).unwrap();
        let obs = ObservationModel::selection(vec![0], 2.0).unwrap();
        let w = importance_weights(&ens, &DVector::from_element(1, 3.0), &obs).unwrap();
        for x in w.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn distant_particle_does_not_overflow() {
        let ens = Ensemble::from_scalars(&[0.0, 1e6]).unwrap();
        let obs = ObservationModel::selection(vec![0], 1.0).unwrap();
        let w = importance_weights(&ens, &DVector::from_element(1, 0.0), &obs).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn rejects_asymmetric_or_indefinite_r() {
        let op = ObservationOperator::Selection(vec![0, 1]);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(ObservationModel::new(op.clone(), asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ObservationModel::new(op, indef).is_err());
    }

    #[test]
    fn wrong_observation_length_is_rejected() {
        let ens = Ensemble::from_scalars(&[0.0, 1.0]).unwrap();
        let obs = ObservationModel::selection(vec![0], 1.0).unwrap();
        assert!(importance_weights(&ens, &DVector::zeros(2), &obs).is_err());
    }

    #[test]
    fn matrix_operator_matches_selection() {
        let ens = Ensemble::from_members(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 4.0]]).unwrap();
        let sel = ObservationModel::selection(vec![1], 0.5).unwrap();
        let mat = ObservationModel::new(
            ObservationOperator::Matrix(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0])),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        let y = DVector::from_element(1, 0.3);
        assert_eq!(
            sel.log_likelihoods(&ens, &y).unwrap(),
            mat.log_likelihoods(&ens, &y).unwrap()
        );
    }
}
