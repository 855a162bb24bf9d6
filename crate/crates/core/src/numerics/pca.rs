use log::warn;

use super::matrix::Matrix;
use super::svd::svd;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Pca2d {
    /// `n x 2` projected coordinates.
    pub coords: Matrix,
    pub singular_values: [f64; 2],
    /// Set when the centered data has rank below two; the second column is
    /// then all zeros.
    pub rank_deficient: bool,
}

/// Projects mean-centered points onto their two leading principal axes.
pub fn pca_2d(points: &Matrix) -> Result<Pca2d> {
    let (n, d) = (points.rows(), points.cols());
    if n < 2 {
        return Err(Error::InsufficientTerms(format!("pca needs at least 2 points, got {n}")));
    }
    let mut centered = points.clone();
    for c in 0..d {
        let m = (0..n).map(|r| points.get(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            centered.set(r, c, points.get(r, c) - m);
        }
    }
    let f = svd(&centered)?;
    let s0 = f.s.first().copied().unwrap_or(0.0);
    let s1 = f.s.get(1).copied().unwrap_or(0.0);
    let keep = |s: f64| s0 > 0.0 && s > 1e-10 * s0;

    let mut coords = Matrix::zeros(n, 2);
    for j in 0..2 {
        let s = if j == 0 { s0 } else { s1 };
        if j >= f.s.len() || !keep(s) {
            continue;
        }
        for r in 0..n {
            // U_j * s_j equals the projection of row r on V_j
            coords.set(r, j, f.u.get(r, j) * s);
        }
    }
    let rank_deficient = !keep(s1);
    if rank_deficient {
        warn!("pca input has rank < 2; second coordinate set to zero");
    }
    Ok(Pca2d {
        coords,
        singular_values: [s0, if keep(s1) { s1 } else { 0.0 }],
        rank_deficient,
    })
}
