//! Two-cluster KMeans++ and a binary RBF-kernel SVM trained with SMO.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const KMEANS_MAX_ITERATIONS: usize = 300;
pub const KMEANS_MAX_RESEEDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Cluster id (0 or 1) per point.
    pub assignments: Vec<usize>,
    pub centroids: [Vec<f64>; 2],
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// KMeans with `k = 2`, KMeans++ seeding and Lloyd iterations until the
/// assignment stops changing.
pub fn kmeans2(points: &Matrix, seed: u64) -> Result<ClusterResult> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::InsufficientTerms("kmeans needs at least 2 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..=KMEANS_MAX_RESEEDS {
        if let Some(r) = kmeans_attempt(points, &mut rng) {
            return Ok(r);
        }
        warn!("kmeans attempt {attempt} produced an empty cluster, reseeding");
    }
    Err(Error::Degenerate(format!(
        "kmeans left a cluster empty after {KMEANS_MAX_RESEEDS} reseeds"
    )))
}

fn kmeans_attempt(points: &Matrix, rng: &mut ChaCha8Rng) -> Option<ClusterResult> {
    let n = points.rows();
    let first = rng.random_range(0..n);
    let c0 = points.row(first).to_vec();
    let d2: Vec<f64> = points.row_iter().map(|p| sq_dist(p, &c0)).collect();
    let total: f64 = d2.iter().sum();
    if total == 0.0 {
        return None;
    }
    let mut target = rng.random_range(0.0..total);
    let mut second = n - 1;
    for (i, d) in d2.iter().enumerate() {
        if target < *d {
            second = i;
            break;
        }
        target -= d;
    }
    let mut centroids = [c0, points.row(second).to_vec()];

    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.row_iter().enumerate() {
            let d0 = sq_dist(p, &centroids[0]);
            let d1 = sq_dist(p, &centroids[1]);
            let c = usize::from(d1 < d0);
            inertia += d0.min(d1);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed || iterations >= KMEANS_MAX_ITERATIONS {
            return Some(ClusterResult {
                assignments,
                centroids,
                inertia,
                inertia_trace: trace,
                iterations,
            });
        }
        let d = points.cols();
        let mut sums = [vec![0.0; d], vec![0.0; d]];
        let mut counts = [0usize; 2];
        for (p, &c) in points.row_iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..2 {
            let k = counts[c] as f64;
            centroids[c] = sums[c].iter().map(|s| s / k).collect();
        }
    }
}

/// Best agreement between binary cluster ids and binary labels over the two
/// possible mappings, on the 0-100 scale.
pub fn cluster_accuracy(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.is_empty() {
        return Err(Error::Empty("no points to score".into()));
    }
    if assignments.iter().chain(labels).any(|&v| v > 1) {
        return Err(Error::InvalidArgument("cluster ids and labels must be 0 or 1".into()));
    }
    let same = assignments.iter().zip(labels).filter(|(a, l)| a == l).count();
    let n = labels.len();
    Ok(100.0 * same.max(n - same) as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    /// Kernel width; `None` means `1 / d`.
    pub gamma: Option<f64>,
    /// Stop when the maximal KKT violation falls below this.
    pub tolerance: f64,
    pub max_iterations: Option<usize>,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            gamma: None,
            tolerance: 1e-3,
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub support_vectors: Matrix,
    /// `alpha_i * y_i` for each support vector.
    pub coefficients: Vec<f64>,
    /// Decision function is `sum coef_i K(sv_i, x) - rho`.
    pub rho: f64,
    pub gamma: f64,
    pub c: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

/// Trains a binary RBF SVM. Labels are 0 or 1 (1 is the positive class).
///
/// Training points are first sorted by (label, coordinates), so the model does
/// not depend on input order. Working pairs are chosen by maximal violation.
pub fn svm_fit(points: &Matrix, labels: &[usize], params: SvmParams) -> Result<SvmModel> {
    let n = points.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} points, {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::InsufficientTerms("svm needs both classes".into()));
    }
    let c = params.c;
    let gamma = params.gamma.unwrap_or(1.0 / points.cols() as f64);
    if !(c > 0.0 && c.is_finite() && gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument("svm needs C > 0 and gamma > 0".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            points
                .row(a)
                .iter()
                .zip(points.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let x: Vec<&[f64]> = order.iter().map(|&i| points.row(i)).collect();
    let y: Vec<f64> = order
        .iter()
        .map(|&i| if labels[i] == 1 { 1.0 } else { -1.0 })
        .collect();

    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = y[i] * y[j] * rbf(x[i], x[j], gamma);
            q[i * n + j] = v;
            q[j * n + i] = v;
        }
    }
    let qd: Vec<f64> = (0..n).map(|i| q[i * n + i]).collect();

    const TAU: f64 = 1e-12;
    let max_iter = params.max_iterations.unwrap_or((100 * n).max(100_000));
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut iterations = 0;
    let mut converged = false;
    let up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    while iterations < max_iter {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < params.tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let (ai, aj) = (alpha[i], alpha[j]);
        let qij = q[i * n + j];
        if y[i] != y[j] {
            let quad = (qd[i] + qd[j] + 2.0 * qij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * qij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for k in 0..n {
            grad[k] += q[i * n + k] * di + q[j * n + k] * dj;
        }
    }
    if !converged {
        warn!("svm stopped after {iterations} iterations without meeting the tolerance");
    }

    // rho: mean over free vectors, else midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };

    let mut sv = Vec::new();
    let mut coefficients = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            sv.push(x[t].to_vec());
            coefficients.push(alpha[t] * y[t]);
        }
    }
    let support_vectors = if sv.is_empty() {
        Matrix::zeros(0, points.cols())
    } else {
        Matrix::from_rows(&sv)?
    };
    Ok(SvmModel {
        support_vectors,
        coefficients,
        rho,
        gamma,
        c,
        converged,
        iterations,
    })
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .row_iter()
            .zip(&self.coefficients)
            .map(|(sv, a)| a * rbf(sv, x, self.gamma))
            .sum::<f64>()
            - self.rho
    }

    /// 1 when the decision value is positive, else 0.
    pub fn predict(&self, x: &[f64]) -> usize {
        usize::from(self.decision(x) > 0.0)
    }
}
