//! Transportation simplex (MODI / stepping-stone) on a dense cost matrix.
//!
//! The basis is kept as a spanning tree of the bipartite row/column graph
//! (`m + n - 1` basic cells, zero-flow cells allowed). Entering cells follow
//! Dantzig's rule with lowest-index tie-breaking; after a run of degenerate
//! pivots the solver switches to Bland's rule to rule out cycling.

use nalgebra::DMatrix;

use super::{cost_matrix, CostMatrix};
use crate::ensemble::{Ensemble, WeightVector};
use crate::error::{FilterError, Result};
use crate::transform::TransformMatrix;

/// Residual marginal errors above this are reported as non-convergence.
const MARGINAL_CHECK: f64 = 1e-8;

struct Basis {
    rows: usize,
    cols: usize,
    flow: Vec<f64>,
    basic: Vec<bool>,
    /// Tree adjacency; nodes `0..rows` are rows, `rows..rows+cols` columns.
    adj: Vec<Vec<usize>>,
}

impl Basis {
    fn cell(&self, i: usize, j: usize) -> usize {
        i * self.cols + j
    }

    fn add(&mut self, i: usize, j: usize, x: f64) {
        let k = self.cell(i, j);
        self.basic[k] = true;
        self.flow[k] = x;
        self.adj[i].push(self.rows + j);
        self.adj[self.rows + j].push(i);
    }

    fn remove(&mut self, i: usize, j: usize) {
        let k = self.cell(i, j);
        self.basic[k] = false;
        self.flow[k] = 0.0;
        let cj = self.rows + j;
        self.adj[i].retain(|&n| n != cj);
        self.adj[cj].retain(|&n| n != i);
    }

    /// North-west corner rule; always yields a spanning tree.
    fn north_west(rows: usize, cols: usize, supply: &[f64], demand: &[f64]) -> Self {
        let mut b = Basis {
            rows,
            cols,
            flow: vec![0.0; rows * cols],
            basic: vec![false; rows * cols],
            adj: vec![Vec::new(); rows + cols],
        };
        let mut s = supply.to_vec();
        let mut d = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = s[i].min(d[j]).max(0.0);
            b.add(i, j, x);
            if i == rows - 1 && j == cols - 1 {
                break;
            }
            if i == rows - 1 {
                s[i] -= x;
                j += 1;
            } else if j == cols - 1 || s[i] <= d[j] {
                d[j] -= s[i];
                s[i] = 0.0;
                i += 1;
            } else {
                s[i] -= d[j];
                d[j] = 0.0;
                j += 1;
            }
        }
        b
    }

    fn potentials(&self, cost: &DMatrix<f64>, u: &mut [f64], v: &mut [f64], seen: &mut [bool]) {
        seen.iter_mut().for_each(|s| *s = false);
        let mut stack = vec![0usize];
        u[0] = 0.0;
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for &next in &self.adj[node] {
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                if node < self.rows {
                    let j = next - self.rows;
                    v[j] = cost[(node, j)] - u[node];
                } else {
                    let j = node - self.rows;
                    u[next] = cost[(next, j)] - v[j];
                }
                stack.push(next);
            }
        }
    }

    /// Tree path from row `i` to column `j`, as (row, col) cells ordered from
    /// the column end.
    fn path(&self, i: usize, j: usize, parent: &mut [usize]) -> Vec<(usize, usize)> {
        const NONE: usize = usize::MAX;
        parent.iter_mut().for_each(|p| *p = NONE);
        let target = self.rows + j;
        let mut queue = std::collections::VecDeque::from([i]);
        parent[i] = i;
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &next in &self.adj[node] {
                if parent[next] == NONE {
                    parent[next] = node;
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = target;
        while node != i {
            let p = parent[node];
            let (r, c) = if node < self.rows {
                (node, p - self.rows)
            } else {
                (p, node - self.rows)
            };
            cells.push((r, c));
            node = p;
        }
        cells
    }
}

/// Minimum-cost transportation plan with the given row supplies and column
/// demands (which must have equal totals). Returns the flow matrix and the
/// number of pivots.
pub fn solve_transportation(
    cost: &DMatrix<f64>,
    supply: &[f64],
    demand: &[f64],
) -> Result<(DMatrix<f64>, usize)> {
    let (rows, cols) = (cost.nrows(), cost.ncols());
    if supply.len() != rows || demand.len() != cols {
        return Err(FilterError::DimensionMismatch {
            context: "transportation marginals",
            expected: rows,
            actual: supply.len(),
        });
    }
    let scale = cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let opt_tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let max_pivots = 50 * rows * cols + 1000;
    let bland_after = 2 * (rows + cols);

    let mut basis = Basis::north_west(rows, cols, supply, demand);
    let mut u = vec![0.0; rows];
    let mut v = vec![0.0; cols];
    let mut seen = vec![false; rows + cols];
    let mut parent = vec![0usize; rows + cols];
    let mut pivots = 0;
    let mut degenerate_run = 0;

    loop {
        basis.potentials(cost, &mut u, &mut v, &mut seen);
        let bland = degenerate_run > bland_after;
        let mut entering = None;
        let mut best = -opt_tol;
        'scan: for i in 0..rows {
            for j in 0..cols {
                let k = i * cols + j;
                if basis.basic[k] {
                    continue;
                }
                let reduced = cost[(i, j)] - u[i] - v[j];
                if reduced < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = reduced;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            break;
        };
        if pivots >= max_pivots {
            let (row_residual, column_residual) = residuals(&basis, supply, demand);
            return Err(FilterError::TransportNotConverged {
                iterations: pivots,
                row_residual,
                column_residual,
            });
        }
        let cycle = basis.path(ei, ej, &mut parent);
        // Cells at even positions (from the column end) lose flow.
        let mut theta = f64::INFINITY;
        let mut leaving = (usize::MAX, usize::MAX);
        for &(r, c) in cycle.iter().step_by(2) {
            let x = basis.flow[basis.cell(r, c)];
            let better = x < theta || (x == theta && basis.cell(r, c) < basis.cell(leaving.0, leaving.1));
            if better {
                theta = x;
                leaving = (r, c);
            }
        }
        let theta = theta.max(0.0);
        for (pos, &(r, c)) in cycle.iter().enumerate() {
            let k = basis.cell(r, c);
            if pos % 2 == 0 {
                basis.flow[k] -= theta;
            } else {
                basis.flow[k] += theta;
            }
        }
        basis.remove(leaving.0, leaving.1);
        basis.add(ei, ej, theta);
        pivots += 1;
        if theta <= 1e-15 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
    }

    let flow = DMatrix::from_fn(rows, cols, |i, j| basis.flow[i * cols + j]);
    Ok((flow, pivots))
}

fn residuals(basis: &Basis, supply: &[f64], demand: &[f64]) -> (f64, f64) {
    let cols = basis.cols;
    let row = (0..basis.rows)
        .map(|i| (basis.flow[i * cols..(i + 1) * cols].iter().sum::<f64>() - supply[i]).abs())
        .fold(0.0, f64::max);
    let col = (0..cols)
        .map(|j| ((0..basis.rows).map(|i| basis.flow[i * cols + j]).sum::<f64>() - demand[j]).abs())
        .fold(0.0, f64::max);
    (row, col)
}

/// The ETPF transform: the exact minimiser of `sum_ij d_ij |z_i - z_j|^2`
/// over the transport polytope.
pub fn exact_ot(ens: &Ensemble, w: &WeightVector) -> Result<TransformMatrix> {
    let mut order: Vec<usize> = (0..ens.size()).collect();
    // Sort members along the most spread-out coordinate so the north-west
    // start is close to the monotone coupling (optimal in one dimension).
    let z = ens.states();
    let axis = (0..ens.dim())
        .max_by(|&a, &b| {
            let va = z.row(a).variance();
            let vb = z.row(b).variance();
            va.total_cmp(&vb)
        })
        .unwrap_or(0);
    order.sort_by(|&a, &b| z[(axis, a)].total_cmp(&z[(axis, b)]).then(a.cmp(&b)));
    let cost = cost_matrix(ens);
    solve_ordered(&cost, w, &order)
}

/// [`exact_ot`] for a precomputed cost matrix (natural member order).
pub fn exact_ot_from_cost(cost: &CostMatrix, w: &WeightVector) -> Result<TransformMatrix> {
    let order: Vec<usize> = (0..cost.size()).collect();
    solve_ordered(cost, w, &order)
}

fn solve_ordered(cost: &CostMatrix, w: &WeightVector, order: &[usize]) -> Result<TransformMatrix> {
    let m = cost.size();
    if w.len() != m {
        return Err(FilterError::DimensionMismatch {
            context: "weights vs cost matrix",
            expected: m,
            actual: w.len(),
        });
    }
    if m < 2 {
        return Err(FilterError::InvalidEnsemble("need at least 2 members".into()));
    }
    let c = cost.matrix();
    let permuted = DMatrix::from_fn(m, m, |i, j| c[(order[i], order[j])]);
    let mut supply: Vec<f64> = order.iter().map(|&i| m as f64 * w.as_slice()[i]).collect();
    let total: f64 = supply.iter().sum();
    supply.iter_mut().for_each(|s| *s *= m as f64 / total);
    let demand = vec![1.0; m];
    let (flow, pivots) = solve_transportation(&permuted, &supply, &demand)?;

    let mut d = DMatrix::zeros(m, m);
    for j in 0..m {
        for i in 0..m {
            d[(order[i], order[j])] = flow[(i, j)];
        }
    }
    let row_residual = d
        .row_iter()
        .zip(w.as_slice())
        .map(|(r, wi)| (r.sum() - m as f64 * wi).abs())
        .fold(0.0, f64::max);
    let column_residual = crate::transform::column_sum_error(&d);
    if row_residual > MARGINAL_CHECK || column_residual > MARGINAL_CHECK {
        return Err(FilterError::TransportNotConverged {
            iterations: pivots,
            row_residual,
            column_residual,
        });
    }
    TransformMatrix::classify(d, w)
}
