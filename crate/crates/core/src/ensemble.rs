//! Ensembles, importance weights and the moment estimators built on them.
//!
//! An ensemble is stored as a dense `N_z x M` matrix whose columns are the
//! members. All covariance estimators use the biased convention (denominator
//! `M`) unless [`CovarianceConvention::Unbiased`] is requested explicitly.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{FilterError, Result};

/// Absolute tolerance on `sum(w) = 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// Normalisation used when turning second moments into a covariance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceConvention {
    /// Denominator `M` (importance-sampling convention).
    #[default]
    Biased,
    /// Denominator `M - 1`.
    Unbiased,
}

impl CovarianceConvention {
    /// Factor that converts a biased estimate into this convention.
    pub fn factor(self, members: usize) -> f64 {
        match self {
            CovarianceConvention::Biased => 1.0,
            CovarianceConvention::Unbiased => members as f64 / (members as f64 - 1.0),
        }
    }
}

/// A forecast or analysis ensemble: `N_z` rows, `M` member columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
    time_index: usize,
}

impl Ensemble {
    pub fn new(states: DMatrix<f64>) -> Result<Self> {
        if states.nrows() < 1 {
            return Err(FilterError::InvalidEnsemble(
                "state dimension must be at least 1".into(),
            ));
        }
        if states.ncols() < 2 {
            return Err(FilterError::InvalidEnsemble(format!(
                "need at least 2 members, got {}",
                states.ncols()
            )));
        }
        if let Some(pos) = states.iter().position(|x| !x.is_finite()) {
            return Err(FilterError::NonFinite(format!(
                "ensemble member {}",
                pos / states.nrows()
            )));
        }
        Ok(Self {
            states,
            time_index: 0,
        })
    }

    /// Builds an ensemble from member state vectors.
    pub fn from_members(members: &[Vec<f64>]) -> Result<Self> {
        let m = members.len();
        let n = members.first().map_or(0, Vec::len);
        if members.iter().any(|z| z.len() != n) {
            return Err(FilterError::InvalidEnsemble(
                "members have different lengths".into(),
            ));
        }
        Self::new(DMatrix::from_fn(n, m, |i, j| members[j][i]))
    }

    /// Scalar ensemble (`N_z = 1`).
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, values.len(), values))
    }

    pub fn with_time_index(mut self, time_index: usize) -> Self {
        self.time_index = time_index;
        self
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn into_states(self) -> DMatrix<f64> {
        self.states
    }

    /// State dimension `N_z`.
    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    /// Number of members `M`.
    pub fn size(&self) -> usize {
        self.states.ncols()
    }

    pub fn member(&self, j: usize) -> DVectorView<'_, f64> {
        self.states.column(j)
    }

    /// Arithmetic mean of the members.
    pub fn mean(&self) -> DVector<f64> {
        self.states.column_mean()
    }

    /// Member deviations from the arithmetic mean, `Z - (1/M) Z 1 1^T`.
    pub fn anomalies(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut a = self.states.clone();
        for mut col in a.column_iter_mut() {
            col -= &mean;
        }
        a
    }
}

/// Normalised importance weights: non-negative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    w: DVector<f64>,
}

impl WeightVector {
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(FilterError::InvalidWeights("empty weight vector".into()));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(FilterError::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum = w.sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(FilterError::InvalidWeights(format!(
                "weights sum to {sum}, not 1"
            )));
        }
        Ok(Self { w })
    }

    pub fn from_slice(w: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(w))
    }

    pub fn uniform(members: usize) -> Self {
        Self {
            w: DVector::from_element(members, 1.0 / members as f64),
        }
    }

    /// Unit weight on member `j`.
    pub fn unit(members: usize, j: usize) -> Self {
        let mut w = DVector::zeros(members);
        w[j] = 1.0;
        Self { w }
    }

    /// Normalises unnormalised log-weights with a max shift before
    /// exponentiation, so a single dominant member yields weight one instead
    /// of an overflow or a 0/0.
    pub fn from_log_weights(log_w: &[f64]) -> Result<Self> {
        if log_w.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(FilterError::NonFinite("log-weights".into()));
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(FilterError::DegenerateWeights);
        }
        let mut w = DVector::from_iterator(log_w.len(), log_w.iter().map(|l| (l - max).exp()));
        let sum = w.sum();
        w /= sum;
        Ok(Self { w })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn as_slice(&self) -> &[f64] {
        self.w.as_slice()
    }

    /// `W - w w^T` with `W = diag(w)`.
    pub fn spread_matrix(&self) -> DMatrix<f64> {
        let mut s = -(&self.w * self.w.transpose());
        for i in 0..self.w.len() {
            s[(i, i)] += self.w[i];
        }
        s
    }

    /// `1 / sum(w_i^2)`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.w.iter().map(|x| x * x).sum::<f64>()
    }
}

pub fn effective_sample_size(w: &WeightVector) -> f64 {
    w.effective_sample_size()
}

fn check_width(ens: &Ensemble, w: &WeightVector) -> Result<()> {
    if ens.size() != w.len() {
        return Err(FilterError::DimensionMismatch {
            context: "weights vs ensemble members",
            expected: ens.size(),
            actual: w.len(),
        });
    }
    Ok(())
}

/// `Z^f w`.
pub fn weighted_mean(ens: &Ensemble, w: &WeightVector) -> Result<DVector<f64>> {
    check_width(ens, w)?;
    Ok(ens.states() * w.as_vector())
}

/// `sum_i w_i (z_i - zbar)(z_i - zbar)^T` with `zbar = Z^f w`.
pub fn weighted_covariance(ens: &Ensemble, w: &WeightVector) -> Result<DMatrix<f64>> {
    let mean = weighted_mean(ens, w)?;
    let n = ens.dim();
    let mut cov = DMatrix::zeros(n, n);
    for (j, &wj) in w.as_slice().iter().enumerate() {
        if wj == 0.0 {
            continue;
        }
        let d = ens.member(j) - &mean;
        cov.ger(wj, &d, &d, 1.0);
    }
    Ok(cov)
}

/// Empirical mean and covariance (denominator `M`).
pub fn ensemble_moments(ens: &Ensemble) -> (DVector<f64>, DMatrix<f64>) {
    ensemble_moments_with(ens, CovarianceConvention::Biased)
}

pub fn ensemble_moments_with(
    ens: &Ensemble,
    convention: CovarianceConvention,
) -> (DVector<f64>, DMatrix<f64>) {
    let m = ens.size();
    let a = ens.anomalies();
    let cov = (&a * a.transpose()) * (convention.factor(m) / m as f64);
    (ens.mean(), cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_single_member_and_nan() {
        assert!(Ensemble::from_scalars(&[1.0]).is_err());
        assert!(matches!(
            Ensemble::from_scalars(&[1.0, f64::NAN]),
            Err(FilterError::NonFinite(_))
        ));
    }

    #[test]
    fn weights_validate_sum() {
        assert!(WeightVector::from_slice(&[0.5, 0.5]).is_ok());
        assert!(WeightVector::from_slice(&[0.5, 0.6]).is_err());
        assert!(WeightVector::from_slice(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn log_weights_all_minus_infinity_is_degenerate() {
        let err = WeightVector::from_log_weights(&[f64::NEG_INFINITY; 3]).unwrap_err();
        assert_eq!(err, FilterError::DegenerateWeights);
    }

    #[test]
    fn weighted_mean_examples() {
        let ens = Ensemble::from_scalars(&[0.0, 1.0]).unwrap();
        let w = WeightVector::from_slice(&[0.75, 0.25]).unwrap();
        assert_eq!(weighted_mean(&ens, &w).unwrap()[0], 0.25);

        let ens = Ensemble::from_members(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 4.0]]).unwrap();
        let mean = weighted_mean(&ens, &WeightVector::uniform(3)).unwrap();
        assert!((mean - ens.mean()).amax() < 1e-15);
        let unit = weighted_mean(&ens, &WeightVector::unit(3, 1)).unwrap();
        assert_eq!(unit, ens.member(1).into_owned());
    }

    #[test]
    fn weighted_covariance_examples() {
        let ens = Ensemble::from_scalars(&[0.0, 1.0]).unwrap();
        let cov = weighted_covariance(&ens, &WeightVector::uniform(2)).unwrap();
        assert!((cov[(0, 0)] - 0.25).abs() < 1e-15);
        let cov = weighted_covariance(&ens, &WeightVector::unit(2, 0)).unwrap();
        assert_eq!(cov[(0, 0)], 0.0);
    }

    #[test]
    fn moments_examples() {
        let ens = Ensemble::from_scalars(&[0.0, 2.0]).unwrap();
        let (mean, cov) = ensemble_moments(&ens);
        assert_eq!(mean[0], 1.0);
        assert_eq!(cov[(0, 0)], 1.0);
        let (_, cov_u) = ensemble_moments_with(&ens, CovarianceConvention::Unbiased);
        assert_eq!(cov_u[(0, 0)], 2.0);

        let constant = Ensemble::from_members(&vec![vec![1.0, 2.0]; 4]).unwrap();
        let (_, cov) = ensemble_moments(&constant);
        assert_eq!(cov.amax(), 0.0);

        let ens = Ensemble::from_members(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 4.0]]).unwrap();
        let (_, cov) = ensemble_moments(&ens);
        let wcov = weighted_covariance(&ens, &WeightVector::uniform(3)).unwrap();
        assert!((cov - wcov).amax() < 1e-14);
    }

    #[test]
    fn effective_sample_size_examples() {
        assert!((WeightVector::uniform(500).effective_sample_size() - 500.0).abs() < 1e-9);
        assert_eq!(WeightVector::unit(4, 2).effective_sample_size(), 1.0);
        let w = WeightVector::from_slice(&[0.5, 0.25, 0.25]).unwrap();
        assert!((effective_sample_size(&w) - 8.0 / 3.0).abs() < 1e-12);
    }
}
