//! Linear ensemble transform filters for sequential data assimilation.
//!
//! An analysis step maps the forecast ensemble `Z^f` (state dimension x
//! members) to `Z^a = Z^f D`. The crate provides transforms `D` from exact
//! and entropic optimal transport, second-order corrections through a
//! Riccati flow or a matrix square root, the ETKF, hybrids of both, and an
//! identical-twin harness on the Lorenz-63 and Lorenz-96 models.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod kalman;
pub mod linalg;
pub mod localization;
pub mod observation;
pub mod particle;
pub mod second_order;
pub mod transform;
pub mod transport;

pub use ensemble::{
    effective_sample_size, ensemble_moments, ensemble_moments_with, weighted_covariance,
    weighted_mean, CovarianceConvention, Ensemble, WeightVector,
};
pub use error::{FilterError, Result};
pub use observation::{importance_weights, importance_weights_with, ObservationModel, ObservationOperator};
pub use particle::{particle_transform, ParticleKind, ParticleOptions};
pub use second_order::{second_order_transform, SecondOrderMode, SecondOrderOptions};
pub use transform::{apply_transform, collapse_transform, ClassFlags, TransformMatrix};
