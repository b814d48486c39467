//! Entropically regularised transport via Sinkhorn's fixed-point iteration.

use nalgebra::{DMatrix, DVector};

use super::{cost_matrix, CostMatrix};
use crate::ensemble::{Ensemble, WeightVector};
use crate::error::{FilterError, Result};
use crate::transform::TransformMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    /// Stop once `|w^l - w|_2 <= epsilon`.
    pub epsilon: f64,
    pub max_iter: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            max_iter: 10_000,
        }
    }
}

/// Scaling vectors and kernel of a running Sinkhorn iteration.
///
/// The kernel uses costs normalised by their maximum,
/// `k_ij = exp(-lambda c_ij / max c)`, so that `-ln(k_ij) / lambda <= 1`.
#[derive(Debug, Clone)]
pub struct SinkhornState {
    kernel: DMatrix<f64>,
    u: DVector<f64>,
    v: DVector<f64>,
    /// `M w`.
    row_target: DVector<f64>,
    iteration: usize,
    lambda: f64,
}

impl SinkhornState {
    pub fn new(ens: &Ensemble, w: &WeightVector, lambda: f64) -> Result<Self> {
        Self::from_cost(&cost_matrix(ens), w, lambda)
    }

    pub fn from_cost(cost: &CostMatrix, w: &WeightVector, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(FilterError::InvalidParameter(format!(
                "Sinkhorn lambda must be positive and finite, got {lambda}"
            )));
        }
        let m = cost.size();
        if w.len() != m {
            return Err(FilterError::DimensionMismatch {
                context: "weights vs cost matrix",
                expected: m,
                actual: w.len(),
            });
        }
        let scale = if cost.scale() > 0.0 { cost.scale() } else { 1.0 };
        let kernel = cost.matrix().map(|c| (-lambda * c / scale).exp());
        if kernel.row_iter().any(|r| r.iter().all(|k| *k == 0.0)) {
            return Err(FilterError::KernelUnderflow);
        }
        Ok(Self {
            kernel,
            u: DVector::from_element(m, 1.0),
            v: DVector::from_element(m, 1.0),
            row_target: w.as_vector() * m as f64,
            iteration: 0,
            lambda,
        })
    }

    /// One full update: `u <- M w / (K v)`, then `v <- 1 / (K^T u)`.
    pub fn step(&mut self) -> Result<()> {
        let kv = &self.kernel * &self.v;
        self.u = self.row_target.component_div(&kv);
        let ktu = self.kernel.tr_mul(&self.u);
        self.v = ktu.map(|x| 1.0 / x);
        if self.u.iter().chain(self.v.iter()).any(|x| !x.is_finite()) {
            return Err(FilterError::KernelUnderflow);
        }
        self.iteration += 1;
        Ok(())
    }

    /// `D^l = diag(u) K diag(v)`.
    pub fn plan(&self) -> DMatrix<f64> {
        let mut d = self.kernel.clone();
        for (j, mut col) in d.column_iter_mut().enumerate() {
            col.component_mul_assign(&self.u);
            col *= self.v[j];
        }
        d
    }

    /// `w^l = (1/M) D^l 1`.
    pub fn marginal(&self) -> DVector<f64> {
        let m = self.u.len() as f64;
        self.u.component_mul(&(&self.kernel * &self.v)) / m
    }

    pub fn residual(&self, w: &WeightVector) -> f64 {
        (self.marginal() - w.as_vector()).norm()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }
}

/// Result of [`sinkhorn_from_cost`].
#[derive(Debug, Clone)]
pub struct SinkhornOutcome {
    /// Marginal-corrected transform, first-order accurate.
    pub transform: TransformMatrix,
    pub iterations: usize,
    /// `|w^{l*} - w|_2` at the stopping iterate.
    pub residual: f64,
}

/// Sinkhorn approximation of the ETPF transform.
pub fn sinkhorn(
    ens: &Ensemble,
    w: &WeightVector,
    lambda: f64,
    options: &SinkhornOptions,
) -> Result<TransformMatrix> {
    sinkhorn_from_cost(&cost_matrix(ens), w, lambda, options).map(|o| o.transform)
}

pub fn sinkhorn_from_cost(
    cost: &CostMatrix,
    w: &WeightVector,
    lambda: f64,
    options: &SinkhornOptions,
) -> Result<SinkhornOutcome> {
    if !(options.epsilon > 0.0) {
        return Err(FilterError::InvalidParameter(
            "Sinkhorn epsilon must be positive".into(),
        ));
    }
    let mut state = SinkhornState::from_cost(cost, w, lambda)?;
    let mut residual = f64::INFINITY;
    while state.iteration() < options.max_iter {
        state.step()?;
        residual = state.residual(w);
        if residual <= options.epsilon {
            break;
        }
    }
    if residual > options.epsilon {
        return Err(FilterError::SinkhornNotConverged {
            iterations: state.iteration(),
            residual,
        });
    }
    // D = D^{l*} - (w^{l*} - w) 1^T fixes the row sums without touching the
    // column sums, since sum_i (w^{l*}_i - w_i) = 0.
    let mut d = state.plan();
    let shift = state.marginal() - w.as_vector();
    for mut col in d.column_iter_mut() {
        col -= &shift;
    }
    Ok(SinkhornOutcome {
        transform: TransformMatrix::classify(d, w)?,
        iterations: state.iteration(),
        residual,
    })
}
