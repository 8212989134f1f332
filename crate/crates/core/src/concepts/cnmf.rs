//! Convex non-negative matrix factorisation.
//!
//! Rows of `T` (M x C) are tubelet features and may be negative. The model is
//!
//! ```text
//! T ~ A (G^T T)
//! ```
//!
//! with `G` (M x Q) holding convex-combination weights (non-negative, columns
//! summing to one) so every centroid row of `G^T T` is a weighted average of
//! tubelet features, and `A` (M x Q) the non-negative assignments. Only the
//! Gram matrix `K = T T^T` enters the updates; the multiplicative step on `G`
//! uses its positive and negative parts `K+ = (|K| + K) / 2`, `K- = (|K| - K) / 2`:
//!
//! ```text
//! G <- G * sqrt((K+ A + K- G A^T A) / (K- A + K+ G A^T A))
//! ```
//!
//! The assignment step solves the non-negative least squares problem for `A`
//! exactly; with the centroids fixed it decouples into one small problem per row.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnmfConfig {
    pub max_iters: usize,
    /// Relative objective change below which iteration stops.
    pub tol: f64,
    pub seed: u64,
    /// Lloyd iterations used to build the initial clustering.
    pub init_iters: usize,
    /// Added to the one-hot initial assignments.
    pub smoothing: f64,
}

impl Default for CnmfConfig {
    fn default() -> Self {
        CnmfConfig {
            max_iters: 500,
            tol: 1e-5,
            seed: 0,
            init_iters: 10,
            smoothing: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CnmfResult {
    /// Convex weights `G`, M x Q, columns sum to one.
    pub weights: Array2<f64>,
    /// Assignments `A`, M x Q.
    pub assignments: Array2<f64>,
    /// Centroids `G^T T`, Q x C.
    pub centroids: Array2<f64>,
    /// Objective before the first update followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
}

impl CnmfResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }

    /// Row-wise argmax of the assignments; ties go to the lowest index.
    pub fn hard_assignment(&self) -> Vec<usize> {
        hard_assignment(&self.assignments)
    }
}

pub(crate) fn hard_assignment(a: &Array2<f64>) -> Vec<usize> {
    a.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Stepwise solver; [`cnmf`] drives it to convergence.
pub struct CnmfSolver<'a> {
    data: &'a Array2<f64>,
    gram_pos: Array2<f64>,
    gram_neg: Array2<f64>,
    weights: Array2<f64>,
    assignments: Array2<f64>,
    objective: f64,
}

impl<'a> CnmfSolver<'a> {
    pub fn new(data: &'a Array2<f64>, q: usize, config: &CnmfConfig) -> Result<Self> {
        let m = data.nrows();
        if q == 0 {
            return Err(Error::InvalidParam("cluster count must be >= 1".into()));
        }
        if q > m {
            return Err(Error::InvalidParam(format!("cluster count {q} exceeds {m} rows")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let gram = data.dot(&data.t());
        let gram_pos = gram.mapv(|v| (v.abs() + v) / 2.0);
        let gram_neg = gram.mapv(|v| (v.abs() - v) / 2.0);

        let labels = lloyd_init(data, q, config.seed, config.init_iters);
        let mut weights = Array2::<f64>::zeros((m, q));
        let mut assignments = Array2::<f64>::from_elem((m, q), config.smoothing);
        for (i, &l) in labels.iter().enumerate() {
            weights[(i, l)] = 1.0;
            assignments[(i, l)] += 1.0;
        }
        for j in 0..q {
            if weights.column(j).sum() == 0.0 {
                // Empty initial cluster: anchor it on the row least served by the others.
                let anchor = farthest_row(data, &labels);
                weights[(anchor, j)] = 1.0;
            }
        }
        normalize_columns(&mut weights, &mut assignments);
        let objective = objective(data, &weights, &assignments);
        Ok(CnmfSolver {
            data,
            gram_pos,
            gram_neg,
            weights,
            assignments,
            objective,
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn assignments(&self) -> &Array2<f64> {
        &self.assignments
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// One sweep: `A` is re-solved exactly row by row (non-negative least
    /// squares against the current centroids), then `G` takes one
    /// multiplicative step and its columns are renormalised (the scale moves
    /// into `A`, leaving `A G^T` unchanged). Returns the new objective.
    pub fn step(&mut self) -> f64 {
        let (kp, kn) = (&self.gram_pos, &self.gram_neg);

        let kg = kp.dot(&self.weights) - kn.dot(&self.weights);
        let hessian = self.weights.t().dot(&kg);
        for (i, mut row) in self.assignments.rows_mut().into_iter().enumerate() {
            let rhs = kg.row(i).to_owned();
            let candidate = nnls_gram(&hessian, &rhs);
            let value = |a: &Array1<f64>| a.dot(&hessian.dot(a)) - 2.0 * rhs.dot(a);
            if value(&candidate) <= value(&row.to_owned()) {
                row.assign(&candidate);
            }
        }

        let ata = self.assignments.t().dot(&self.assignments);
        let kp_a = kp.dot(&self.assignments);
        let kn_a = kn.dot(&self.assignments);
        let numer = &kp_a + &kn.dot(&self.weights).dot(&ata);
        let denom = &kn_a + &kp.dot(&self.weights).dot(&ata);
        sqrt_update(&mut self.weights, &numer, &denom);

        normalize_columns(&mut self.weights, &mut self.assignments);
        self.objective = objective(self.data, &self.weights, &self.assignments);
        self.objective
    }

    pub fn finish(self, objective_trace: Vec<f64>) -> CnmfResult {
        let centroids = self.weights.t().dot(self.data);
        CnmfResult {
            weights: self.weights,
            assignments: self.assignments,
            centroids,
            objective_trace,
        }
    }
}

fn sqrt_update(target: &mut Array2<f64>, numer: &Array2<f64>, denom: &Array2<f64>) {
    ndarray::Zip::from(target).and(numer).and(denom).for_each(|x, &n, &d| {
        *x *= (n / d.max(FLOOR)).sqrt();
    });
}

fn normalize_columns(weights: &mut Array2<f64>, assignments: &mut Array2<f64>) {
    for j in 0..weights.ncols() {
        let s = weights.column(j).sum();
        if s > 0.0 {
            weights.column_mut(j).mapv_inplace(|v| v / s);
            assignments.column_mut(j).mapv_inplace(|v| v * s);
        } else {
            // Column collapsed to zero: spread it uniformly and drop its assignments.
            let m = weights.nrows() as f64;
            weights.column_mut(j).fill(1.0 / m);
            assignments.column_mut(j).fill(0.0);
        }
    }
}

/// `||T - A G^T T||_F^2`.
pub fn objective(data: &Array2<f64>, weights: &Array2<f64>, assignments: &Array2<f64>) -> f64 {
    let centroids = weights.t().dot(data);
    let recon = assignments.dot(&centroids);
    (data - &recon).iter().map(|v| v * v).sum()
}

/// Factorises `data` into `q` convex concepts.
pub fn cnmf(data: &Array2<f64>, q: usize, config: &CnmfConfig) -> Result<CnmfResult> {
    let mut solver = CnmfSolver::new(data, q, config)?;
    let mut trace = vec![solver.objective()];
    for _ in 0..config.max_iters {
        let prev = solver.objective();
        let obj = solver.step();
        trace.push(obj);
        if obj <= f64::MIN_POSITIVE || (prev - obj).abs() <= config.tol * prev.abs() {
            break;
        }
    }
    Ok(solver.finish(trace))
}

/// Lawson-Hanson active set for `min a^T H a - 2 b^T a` subject to `a >= 0`,
/// with `H` symmetric positive semi-definite.
fn nnls_gram(h: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let q = b.len();
    let scale = (0..q).map(|j| h[(j, j)]).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale.max(b.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut a = Array1::<f64>::zeros(q);
    let mut passive = vec![false; q];
    for _ in 0..3 * q + 3 {
        let grad = b - &h.dot(&a);
        let Some(enter) = (0..q)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&x, &y| grad[x].total_cmp(&grad[y]))
        else {
            break;
        };
        passive[enter] = true;
        loop {
            let idx: Vec<usize> = (0..q).filter(|&j| passive[j]).collect();
            let s = solve_spd(&h.select(Axis(0), &idx).select(Axis(1), &idx), &b.select(Axis(0), &idx));
            if s.iter().all(|&v| v > 0.0) {
                a.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    a[j] = s[k];
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (k, &j) in idx.iter().enumerate() {
                if s[k] <= 0.0 {
                    let denom = a[j] - s[k];
                    if denom > 0.0 {
                        alpha = alpha.min(a[j] / denom);
                    }
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                a[j] += alpha * (s[k] - a[j]);
                if a[j] <= tol / scale {
                    a[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    a
}

/// Solves `H x = b` for a small symmetric positive semi-definite `H` by
/// Gaussian elimination with partial pivoting and a tiny ridge.
fn solve_spd(h: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let ridge = 1e-13 * (0..n).map(|j| h[(j, j)]).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let mut m = h.clone();
    for j in 0..n {
        m[(j, j)] += ridge;
    }
    let mut x = b.clone();
    for col in 0..n {
        let pivot = (col..n).max_by(|&r, &s| m[(r, col)].abs().total_cmp(&m[(s, col)].abs())).expect("non-empty");
        if pivot != col {
            for k in 0..n {
                m.swap((col, k), (pivot, k));
            }
            x.swap(col, pivot);
        }
        let p = m[(col, col)];
        if p.abs() < f64::MIN_POSITIVE {
            continue;
        }
        for r in col + 1..n {
            let f = m[(r, col)] / p;
            if f != 0.0 {
                for k in col..n {
                    m[(r, k)] -= f * m[(col, k)];
                }
                x[r] -= f * x[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for k in col + 1..n {
            acc -= m[(col, k)] * x[k];
        }
        let p = m[(col, col)];
        x[col] = if p.abs() < f64::MIN_POSITIVE { 0.0 } else { acc / p };
    }
    x
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by `iters` Lloyd steps; returns row labels.
fn lloyd_init(data: &Array2<f64>, q: usize, seed: u64, iters: usize) -> Vec<usize> {
    let m = data.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Array1<f64>> = vec![data.row(rng.random_range(0..m)).to_owned()];
    while centers.len() < q {
        let d: Vec<f64> = (0..m)
            .map(|i| {
                centers
                    .iter()
                    .map(|c| sq_dist(data.row(i), c.view()))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &di) in d.iter().enumerate() {
                if r < di {
                    chosen = i;
                    break;
                }
                r -= di;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centers.push(data.row(pick).to_owned());
    }

    let assign = |centers: &[Array1<f64>]| -> Vec<usize> {
        (0..m)
            .map(|i| {
                let mut best = (f64::INFINITY, 0);
                for (j, c) in centers.iter().enumerate() {
                    let d = sq_dist(data.row(i), c.view());
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                best.1
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..iters {
        for (j, c) in centers.iter_mut().enumerate() {
            let rows: Vec<usize> = (0..m).filter(|&i| labels[i] == j).collect();
            if !rows.is_empty() {
                *c = data.select(Axis(0), &rows).mean_axis(Axis(0)).expect("non-empty");
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

fn farthest_row(data: &Array2<f64>, labels: &[usize]) -> usize {
    let q = labels.iter().max().map_or(0, |&l| l + 1);
    let means: Vec<Option<Array1<f64>>> = (0..q)
        .map(|j| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == j).collect();
            (!rows.is_empty()).then(|| data.select(Axis(0), &rows).mean_axis(Axis(0)).expect("non-empty"))
        })
        .collect();
    let mut best = (-1.0, 0);
    for (i, &l) in labels.iter().enumerate() {
        let d = means[l].as_ref().map_or(0.0, |c| sq_dist(data.row(i), c.view()));
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}
