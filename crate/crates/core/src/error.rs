use thiserror::Error;

/// Errors raised by the filtering primitives and the experiment harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("degenerate weights")]
    DegenerateWeights,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("observation error covariance must be symmetric positive definite")]
    InvalidCovariance,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "transport solver stopped after {iterations} pivots \
         (row residual {row_residual:e}, column residual {column_residual:e})"
    )]
    TransportNotConverged {
        iterations: usize,
        row_residual: f64,
        column_residual: f64,
    },
    #[error("Sinkhorn iteration did not converge after {iterations} iterations (|w^l - w| = {residual:e})")]
    SinkhornNotConverged { iterations: usize, residual: f64 },
    #[error("kernel underflow")]
    KernelUnderflow,
    #[error("transform is not first-order accurate (marginal error {0:e})")]
    NotFirstOrder(f64),
    #[error("transform failed the second-order certificate (covariance error {0:e})")]
    NotSecondOrder(f64),
    #[error("Riccati flow diverged after {steps} steps")]
    RiccatiDiverged { steps: usize },
    #[error("Riccati flow did not converge within {steps} steps (last step {step_norm:e}, residual {residual:e})")]
    RiccatiNotConverged {
        steps: usize,
        step_norm: f64,
        residual: f64,
    },
    #[error("singular value decomposition failed")]
    SvdFailed,
    #[error("integration produced a non-finite state for member {member}")]
    IntegrationBlowUp { member: usize },
    #[error("grid point {index}: {source}")]
    GridPoint {
        index: usize,
        #[source]
        source: Box<FilterError>,
    },
    #[error("cycle {cycle} ({stage}): {source}")]
    Cycle {
        cycle: usize,
        stage: &'static str,
        #[source]
        source: Box<FilterError>,
    },
}

pub type Result<T> = std::result::Result<T, FilterError>;

impl FilterError {
    pub(crate) fn at_grid_point(self, index: usize) -> Self {
        FilterError::GridPoint {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_cycle(self, cycle: usize, stage: &'static str) -> Self {
        FilterError::Cycle {
            cycle,
            stage,
            source: Box::new(self),
        }
    }
}
