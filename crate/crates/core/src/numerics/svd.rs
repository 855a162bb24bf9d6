//! One-sided Jacobi SVD and power iteration for the leading right singular
//! vector.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{canonical_sign, dot, norm, Matrix};
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;

pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 10_000;
const POWER_SEED: u64 = 0x6264_6462;

/// Thin singular value decomposition `M = U diag(S) V^T`.
///
/// For an `m x n` input with `k = min(m, n)`, `u` is `m x k`, `v` is `n x k`
/// and `s` holds `k` non-negative values in descending order. Columns of `u`
/// belonging to numerically zero singular values are completed from the
/// standard basis, so `u` always has orthonormal columns. Every column of `u`
/// has its largest-magnitude entry positive.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// Number of singular values above `max(m, n) * eps * s_max`.
    pub fn rank(&self) -> usize {
        let tol = rank_tolerance(self.u.rows(), self.v.rows(), &self.s);
        self.s.iter().filter(|&&s| s > tol).count()
    }

    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for c in 0..k {
                let v = us.get(r, c) * self.s[c];
                us.set(r, c, v);
            }
        }
        us.matmul(&self.v.transpose()).expect("svd factor shapes agree")
    }
}

fn rank_tolerance(m: usize, n: usize, s: &[f64]) -> f64 {
    let smax = s.first().copied().unwrap_or(0.0);
    m.max(n) as f64 * f64::EPSILON * smax
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Empty("svd of an empty matrix".into()));
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (mut u_cols, s, mut v_cols) = if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m)?;
        (u, s, v)
    } else {
        let (u, s, v) = jacobi_tall(&m.transpose())?;
        (v, s, u)
    };
    // u_cols may be short of orthonormal completions when m < n: the columns
    // came from the rotation matrix, which is already orthogonal.
    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        if canonical_sign(u) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(Svd {
        u: Matrix::from_columns(m.rows(), &u_cols),
        s,
        v: Matrix::from_columns(m.cols(), &v_cols),
    })
}

type Factors = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// Hestenes one-sided Jacobi on an `m x n` matrix with `m >= n`.
fn jacobi_tall(m: &Matrix) -> Result<Factors> {
    let (rows, n) = (m.rows(), m.cols());
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let fro2: f64 = m.data().iter().map(|x| x * x).sum();
    let tiny = (f64::EPSILON * f64::EPSILON) * fro2;
    let tol = rows as f64 * f64::EPSILON;

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                if alpha <= tiny || beta <= tiny {
                    continue;
                }
                let gamma = dot(&a[p], &a[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<(usize, f64)> = a.iter().map(|c| norm(c)).enumerate().collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let s: Vec<f64> = order.iter().map(|&(_, s)| s).collect();
    let tol_rank = rank_tolerance(rows, n, &s);

    let mut u: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &(j, sigma)) in order.iter().enumerate() {
        if sigma > tol_rank {
            let mut col: Vec<f64> = a[j].iter().map(|x| x / sigma).collect();
            if orthonormalize_against(&mut col, &u) {
                u.push(col);
                continue;
            }
        }
        pending.push(slot);
        u.push(Vec::new());
    }
    complete_basis(&mut u, &pending, rows);

    let v_sorted = order.iter().map(|&(j, _)| v[j].clone()).collect();
    Ok((u, s, v_sorted))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Two passes of modified Gram-Schmidt against the non-empty columns of
/// `basis`; normalizes `col`. Returns false when almost nothing is left.
fn orthonormalize_against(col: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let before = norm(col);
    if before == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for b in basis.iter().filter(|b| !b.is_empty()) {
            let proj = dot(col, b);
            col.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
    }
    let after = norm(col);
    if after < 0.5 * before {
        return false;
    }
    col.iter_mut().for_each(|x| *x /= after);
    true
}

/// Fills the empty slots of `u` with standard basis vectors orthogonalized
/// against everything already present, scanning e_0, e_1, ... in order.
fn complete_basis(u: &mut [Vec<f64>], pending: &[usize], rows: usize) {
    let mut next = 0usize;
    for &slot in pending {
        loop {
            assert!(next < rows, "standard basis exhausted during completion");
            let mut e = vec![0.0; rows];
            e[next] = 1.0;
            next += 1;
            if orthonormalize_against(&mut e, u) {
                u[slot] = e;
                break;
            }
        }
    }
}

/// Leading right singular vector found by power iteration on `M^T M`.
#[derive(Debug, Clone)]
pub struct TopSingularVector {
    pub vector: Vec<f64>,
    pub singular_value: f64,
    /// Estimate of the second singular value, used for the degeneracy check.
    pub second_singular_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// True when the top two singular values are tied (direction ill-defined).
    pub degenerate: bool,
}

pub fn top_right_singular_vector(m: &Matrix) -> Result<TopSingularVector> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Empty("top singular vector of an empty matrix".into()));
    }
    top_singular_vector_from_gram(&m.t_matmul(m)?)
}

/// Same as [`top_right_singular_vector`] for a caller that already holds
/// `M^T M`, which must be symmetric positive semidefinite.
pub fn top_singular_vector_from_gram(gram: &Matrix) -> Result<TopSingularVector> {
    let d = gram.rows();
    if d == 0 || gram.cols() != d {
        return Err(Error::Shape("gram matrix must be square and non-empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let start: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (mut vector, lambda, iterations, converged) = power_iterate(gram, start.clone(), None)?;
    if lambda == 0.0 {
        return Err(Error::Degenerate("matrix is all zeros".into()));
    }

    let second = if d > 1 {
        power_iterate(gram, start, Some(&vector))
            .map(|(_, l, _, _)| l)
            .unwrap_or(0.0)
    } else {
        0.0
    };
    let s1 = lambda.max(0.0).sqrt();
    let s2 = second.max(0.0).sqrt();
    let degenerate = s1 - s2 <= 1e-12 * s1.max(1.0);
    if degenerate {
        warn!("top two singular values are tied ({s1} vs {s2}); direction is ill-defined");
    } else if !converged {
        warn!("power iteration hit {POWER_MAX_ITERATIONS} iterations without converging");
    }
    canonical_sign(&mut vector);
    Ok(TopSingularVector {
        vector,
        singular_value: s1,
        second_singular_value: s2,
        iterations,
        converged,
        degenerate,
    })
}

/// Returns (vector, Rayleigh quotient, iterations, converged). With `deflate`
/// the iterate is kept orthogonal to the given unit vector.
fn power_iterate(
    gram: &Matrix,
    mut v: Vec<f64>,
    deflate: Option<&[f64]>,
) -> Result<(Vec<f64>, f64, usize, bool)> {
    let project_out = |x: &mut Vec<f64>| {
        if let Some(u) = deflate {
            let p = dot(x, u);
            x.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
    };
    project_out(&mut v);
    let n0 = norm(&v);
    if n0 == 0.0 {
        return Ok((v, 0.0, 0, true));
    }
    v.iter_mut().for_each(|x| *x /= n0);

    for it in 1..=POWER_MAX_ITERATIONS {
        let mut w = gram.left_apply(&v)?;
        project_out(&mut w);
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok((v, 0.0, it, true));
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let diff = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = w;
        if diff < POWER_TOLERANCE {
            let lambda = dot(&v, &gram.left_apply(&v)?);
            return Ok((v, lambda, it, true));
        }
    }
    let lambda = dot(&v, &gram.left_apply(&v)?);
    Ok((v, lambda, POWER_MAX_ITERATIONS, false))
}
