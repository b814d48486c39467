//! Linear ensemble transforms `Z^a = Z^f D` and their accuracy classes.

use nalgebra::DMatrix;

use crate::ensemble::{Ensemble, WeightVector};
use crate::error::{FilterError, Result};

/// Entrywise tolerance on `D^T 1 = 1` and `(1/M) D 1 = w`.
pub const MARGINAL_TOLERANCE: f64 = 1e-8;
/// Entries down to this value count as non-negative.
pub const NONNEGATIVITY_TOLERANCE: f64 = -1e-12;
/// Entrywise tolerance on the second-order covariance identity.
pub const COVARIANCE_TOLERANCE: f64 = 1e-6;

/// Class membership of a transform relative to a weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassFlags {
    /// `D^T 1 = 1` and `D 1 = M w`.
    pub in_d1: bool,
    /// First-order accurate with non-negative entries.
    pub in_d1_plus: bool,
    /// First-order accurate and `(D - w1^T)(D - w1^T)^T = M (W - w w^T)`.
    pub in_d2: bool,
}

/// An `M x M` transform matrix with class flags computed against the weights
/// it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrix {
    d: DMatrix<f64>,
    flags: ClassFlags,
}

impl TransformMatrix {
    /// Wraps `d` and computes its class flags for `w`.
    pub fn classify(d: DMatrix<f64>, w: &WeightVector) -> Result<Self> {
        check_square(&d, w.len())?;
        let flags = class_flags(&d, w);
        Ok(Self { d, flags })
    }

    /// Wraps a transform that is not tied to a weight vector (e.g. a Kalman
    /// transform); all flags are false.
    pub fn unclassified(d: DMatrix<f64>) -> Result<Self> {
        if d.nrows() != d.ncols() {
            return Err(FilterError::DimensionMismatch {
                context: "transform must be square",
                expected: d.nrows(),
                actual: d.ncols(),
            });
        }
        Ok(Self {
            d,
            flags: ClassFlags::default(),
        })
    }

    pub fn identity(members: usize) -> Self {
        Self {
            d: DMatrix::identity(members, members),
            flags: ClassFlags::default(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.d
    }

    pub fn flags(&self) -> ClassFlags {
        self.flags
    }

    pub fn size(&self) -> usize {
        self.d.nrows()
    }

    /// Largest deviation of a column sum from one.
    pub fn column_sum_error(&self) -> f64 {
        column_sum_error(&self.d)
    }
}

fn check_square(d: &DMatrix<f64>, m: usize) -> Result<()> {
    if d.nrows() != m || d.ncols() != m {
        return Err(FilterError::DimensionMismatch {
            context: "transform vs weights",
            expected: m,
            actual: d.nrows().max(d.ncols()),
        });
    }
    Ok(())
}

pub(crate) fn column_sum_error(d: &DMatrix<f64>) -> f64 {
    d.column_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Largest deviation of `(1/M) D 1` from `w`.
pub fn mean_condition_error(d: &DMatrix<f64>, w: &WeightVector) -> f64 {
    let m = d.nrows() as f64;
    d.row_iter()
        .zip(w.as_slice())
        .map(|(r, wi)| (r.sum() / m - wi).abs())
        .fold(0.0, f64::max)
}

/// Entrywise error of `(D - w1^T)(D - w1^T)^T - M (W - w w^T)`.
pub fn covariance_condition_error(d: &DMatrix<f64>, w: &WeightVector) -> f64 {
    let m = d.nrows();
    let mut b = d.clone();
    for j in 0..m {
        for i in 0..m {
            b[(i, j)] -= w.as_slice()[i];
        }
    }
    let target = w.spread_matrix() * m as f64;
    (&b * b.transpose() - target).amax()
}

/// Class membership of `d` relative to `w`.
pub fn class_flags(d: &DMatrix<f64>, w: &WeightVector) -> ClassFlags {
    let in_d1 = column_sum_error(d) <= MARGINAL_TOLERANCE
        && mean_condition_error(d, w) <= MARGINAL_TOLERANCE;
    let in_d1_plus = in_d1 && d.iter().all(|x| *x >= NONNEGATIVITY_TOLERANCE);
    let in_d2 = in_d1 && covariance_condition_error(d, w) <= COVARIANCE_TOLERANCE;
    ClassFlags {
        in_d1,
        in_d1_plus,
        in_d2,
    }
}

/// `D_0 = w 1^T`: every analysis member collapses onto the weighted mean.
pub fn collapse_transform(w: &WeightVector) -> DMatrix<f64> {
    let m = w.len();
    DMatrix::from_fn(m, m, |i, _| w.as_slice()[i])
}

/// `Z^a = Z^f D`.
pub fn apply_transform(ens: &Ensemble, d: &TransformMatrix) -> Result<Ensemble> {
    if d.size() != ens.size() {
        return Err(FilterError::DimensionMismatch {
            context: "transform vs ensemble members",
            expected: ens.size(),
            actual: d.size(),
        });
    }
    Ok(Ensemble::new(ens.states() * d.matrix())?.with_time_index(ens.time_index()))
}

/// Mean squared member displacement `(1/M) sum_i |z_i^a - z_i^f|^2`.
pub fn mean_squared_displacement(ens: &Ensemble, d: &DMatrix<f64>) -> f64 {
    let m = ens.size();
    let mut shift = d.clone();
    for i in 0..m {
        shift[(i, i)] -= 1.0;
    }
    (ens.states() * shift).norm_squared() / m as f64
}
