//! Independent reference computations and random instance generators shared
//! by the integration tests. Nothing here calls into the solvers under test.

#![allow(dead_code)]

use letf::{Ensemble, WeightVector};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_ensemble(rng: &mut ChaCha8Rng, nz: usize, m: usize) -> Ensemble {
    let scale = 0.5 + 2.0 * rng.random::<f64>();
    Ensemble::new(DMatrix::from_fn(nz, m, |_, _| scale * normal(rng))).unwrap()
}

/// Weights from a Gaussian likelihood of a random observation of the first
/// component; the spread of the log-weights ranges from mild to strong.
pub fn random_weights(rng: &mut ChaCha8Rng, ens: &Ensemble) -> WeightVector {
    let y = normal(rng);
    let r = 0.2 + 4.0 * rng.random::<f64>();
    let logs: Vec<f64> = (0..ens.size())
        .map(|j| -0.5 * (ens.states()[(0, j)] - y).powi(2) / r)
        .collect();
    WeightVector::from_log_weights(&logs).unwrap()
}

/// Dirichlet(1, ..., 1) weights.
pub fn flat_dirichlet(rng: &mut ChaCha8Rng, m: usize) -> WeightVector {
    let e: Vec<f64> = (0..m).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = e.iter().sum();
    WeightVector::from_slice(&e.iter().map(|x| x / s).collect::<Vec<_>>()).unwrap()
}

pub fn squared_distances(ens: &Ensemble) -> DMatrix<f64> {
    let z = ens.states();
    DMatrix::from_fn(ens.size(), ens.size(), |i, j| (z.column(i) - z.column(j)).norm_squared())
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&self, mut x: usize) -> usize {
        while self.0[x] != x {
            x = self.0[x];
        }
        x
    }
}

/// Minimum of `sum c_ij d_ij` over the transport polytope
/// `{D >= 0, D^T 1 = 1, (1/M) D 1 = w}` by enumerating every basic solution:
/// each vertex is supported on a spanning tree of the bipartite graph
/// `K_{M,M}`, whose flows are fixed by the marginals.
pub fn brute_force_transport(cost: &DMatrix<f64>, w: &[f64]) -> f64 {
    let m = w.len();
    let supply: Vec<f64> = w.iter().map(|x| x * m as f64).collect();
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(2 * m - 1);
    let mut dsu = Dsu((0..2 * m).collect());
    enumerate_trees(&cells, 0, &mut chosen, &mut dsu, 2 * m - 1, &mut |tree| {
        if let Some(flow) = tree_flows(tree, &supply, m) {
            if flow.iter().all(|&(_, f)| f >= -1e-12) {
                let value: f64 = flow.iter().map(|&((i, j), f)| cost[(i, j)] * f / m as f64).sum();
                best = best.min(value);
            }
        }
    });
    best
}

type Visitor<'a> = dyn FnMut(&[(usize, usize)]) + 'a;

fn enumerate_trees(
    cells: &[(usize, usize)],
    start: usize,
    chosen: &mut Vec<(usize, usize)>,
    dsu: &mut Dsu,
    size: usize,
    visit: &mut Visitor<'_>,
) {
    if chosen.len() == size {
        visit(chosen);
        return;
    }
    let m = cells.len();
    if m - start < size - chosen.len() {
        return;
    }
    for k in start..m {
        if m - k < size - chosen.len() {
            break;
        }
        let (i, j) = cells[k];
        let n = dsu.0.len() / 2;
        let (a, b) = (dsu.find(i), dsu.find(n + j));
        if a == b {
            continue;
        }
        let saved = dsu.0.clone();
        dsu.0[a] = b;
        chosen.push((i, j));
        enumerate_trees(cells, k + 1, chosen, dsu, size, visit);
        chosen.pop();
        dsu.0 = saved;
    }
}

/// Flows on a spanning tree with row supplies `supply` and unit column
/// demands, by repeatedly peeling leaves.
fn tree_flows(tree: &[(usize, usize)], supply: &[f64], m: usize) -> Option<Vec<((usize, usize), f64)>> {
    let mut remaining: Vec<f64> = supply.iter().copied().chain(std::iter::repeat_n(1.0, m)).collect();
    let mut alive = vec![true; tree.len()];
    let mut degree = vec![0usize; 2 * m];
    for &(i, j) in tree {
        degree[i] += 1;
        degree[m + j] += 1;
    }
    let mut flows = Vec::with_capacity(tree.len());
    for _ in 0..tree.len() {
        let (e, leaf) = (0..tree.len()).filter(|&e| alive[e]).find_map(|e| {
            let (i, j) = tree[e];
            if degree[i] == 1 {
                Some((e, i))
            } else if degree[m + j] == 1 {
                Some((e, m + j))
            } else {
                None
            }
        })?;
        let (i, j) = tree[e];
        let other = if leaf == i { m + j } else { i };
        let f = remaining[leaf];
        remaining[other] -= f;
        remaining[leaf] = 0.0;
        degree[i] -= 1;
        degree[m + j] -= 1;
        alive[e] = false;
        flows.push(((i, j), f));
    }
    Some(flows)
}

/// `int (F(t) - 1{t >= y})^2 dt` for the empirical CDF `F` of `values`,
/// integrated exactly over the piecewise-constant integrand.
pub fn crps_integral(values: &[f64], y: f64) -> f64 {
    let m = values.len() as f64;
    let mut knots: Vec<f64> = values.to_vec();
    knots.push(y);
    knots.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for pair in knots.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let f = values.iter().filter(|&&x| x <= mid).count() as f64 / m;
        let h = if mid >= y { 1.0 } else { 0.0 };
        total += (f - h).powi(2) * (b - a);
    }
    total
}

/// Posterior mean and variance of a scalar Gaussian prior `N(m, p)` observed
/// directly with error variance `r`.
pub fn scalar_kalman(m: f64, p: f64, r: f64, y: f64) -> (f64, f64) {
    let gain = p / (p + r);
    (m + gain * (y - m), (1.0 - gain) * p)
}

/// Sample mean and unbiased sample variance.
pub fn mean_and_unbiased_variance(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    (mean, values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0))
}

/// `(1/M) sum_i |z_i^a - z_i^f|^2` written out member by member.
pub fn displacement(forecast: &Ensemble, d: &DMatrix<f64>) -> f64 {
    let za = forecast.states() * d;
    let m = forecast.size();
    (0..m)
        .map(|i| (za.column(i) - forecast.states().column(i)).norm_squared())
        .sum::<f64>()
        / m as f64
}

/// Biased weighted covariance as an explicit sum over members.
pub fn weighted_covariance_sum(ens: &Ensemble, w: &WeightVector) -> DMatrix<f64> {
    let z = ens.states();
    let mean: DVector<f64> = z * w.as_vector();
    let mut c = DMatrix::zeros(ens.dim(), ens.dim());
    for i in 0..ens.size() {
        let d = z.column(i) - &mean;
        c += &d * d.transpose() * w.as_slice()[i];
    }
    c
}

/// Haar orthogonal matrix of size `m` with `Q 1 = 1`, built by
/// Gram-Schmidt on `[1, gaussian columns]`.
pub fn random_mean_preserving_orthogonal(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let mut basis: Vec<DVector<f64>> = vec![DVector::from_element(m, 1.0 / (m as f64).sqrt())];
    while basis.len() < m {
        let mut v = DVector::from_fn(m, |_, _| normal(rng));
        for b in &basis {
            v -= b * b.dot(&v);
        }
        let n = v.norm();
        if n > 1e-8 {
            basis.push(v / n);
        }
    }
    let u = DMatrix::from_columns(&basis);
    // Random rotation in the complement of the first basis vector.
    let g = DMatrix::from_fn(m - 1, m - 1, |_, _| normal(rng));
    let qr = g.qr();
    let mut inner = qr.q();
    let r = qr.r();
    for j in 0..m - 1 {
        if r[(j, j)] < 0.0 {
            inner.column_mut(j).neg_mut();
        }
    }
    let mut block = DMatrix::identity(m, m);
    block.view_mut((1, 1), (m - 1, m - 1)).copy_from(&inner);
    &u * block * u.transpose()
}
