//! Optimal transport between the importance-weighted forecast ensemble and
//! the uniformly weighted analysis ensemble.
//!
//! Both solvers return transforms on the transport polytope
//! `{D >= 0, D^T 1 = 1, (1/M) D 1 = w}`: [`exact_ot`] solves the linear
//! program exactly, [`sinkhorn`] solves its entropic regularisation and then
//! applies a rank-one row correction so that the marginals hold exactly.

mod simplex;
mod sinkhorn;

use nalgebra::DMatrix;

use crate::ensemble::Ensemble;

pub use simplex::{exact_ot, exact_ot_from_cost, solve_transportation};
pub use sinkhorn::{sinkhorn, sinkhorn_from_cost, SinkhornOptions, SinkhornOutcome, SinkhornState};

/// Pairwise squared Euclidean distances between ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    c: DMatrix<f64>,
    scale: f64,
}

impl CostMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Largest entry; used to make the Sinkhorn regularisation dimensionless.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn size(&self) -> usize {
        self.c.nrows()
    }
}

/// `c_ij = |z_i - z_j|^2`; works for scalar (`1 x M`) ensembles too.
pub fn cost_matrix(ens: &Ensemble) -> CostMatrix {
    let z = ens.states();
    let m = ens.size();
    let mut c = DMatrix::zeros(m, m);
    let mut scale = 0.0f64;
    for j in 0..m {
        for i in (j + 1)..m {
            let d = (z.column(i) - z.column(j)).norm_squared();
            c[(i, j)] = d;
            c[(j, i)] = d;
            scale = scale.max(d);
        }
    }
    CostMatrix { c, scale }
}

/// `sum_ij d_ij c_ij`.
pub fn transport_cost(cost: &CostMatrix, d: &DMatrix<f64>) -> f64 {
    cost.c.component_mul(d).sum()
}
