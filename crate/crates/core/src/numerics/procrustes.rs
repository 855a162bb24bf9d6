use super::matrix::Matrix;
use super::svd::svd;
use crate::error::{Error, Result};

/// Orthogonal `W` minimizing `||xs * W - xt||_F` (rows are paired items).
///
/// `W = U V^T` for `U S V^T = svd(xs^T xt)`. When the cross matrix is rank
/// deficient the optimum is not unique; the free block acting on the null
/// spaces is chosen as the proper rotation closest to the identity, so
/// directions the data says nothing about are left as undisturbed as possible
/// and identical inputs give exactly the identity.
pub fn procrustes(xs: &Matrix, xt: &Matrix) -> Result<Matrix> {
    if xs.rows() != xt.rows() || xs.cols() != xt.cols() {
        return Err(Error::Shape(format!(
            "procrustes needs equal shapes, got {}x{} and {}x{}",
            xs.rows(),
            xs.cols(),
            xt.rows(),
            xt.cols()
        )));
    }
    if xs.rows() == 0 {
        return Err(Error::Empty("procrustes needs at least one pair".into()));
    }
    if xs == xt {
        // polar factor of a positive semidefinite gram matrix
        return Ok(Matrix::identity(xs.cols()));
    }
    orthogonal_polar(&xs.t_matmul(xt)?)
}

/// Orthogonal polar factor of a square matrix, with the identity-nearest
/// proper completion on its null space.
pub fn orthogonal_polar(m: &Matrix) -> Result<Matrix> {
    let d = m.rows();
    if d != m.cols() {
        return Err(Error::Shape("polar factor of a non-square matrix".into()));
    }
    let f = svd(m)?;
    let r = f.rank();
    if r == d {
        return f.u.matmul(&f.v.transpose());
    }

    let (ur, un) = split_columns(&f.u, r);
    let (vr, vn) = split_columns(&f.v, r);

    // maximize tr(R C) with C = Vn^T Un, subject to det(W) = +1
    let c = vn.t_matmul(&un)?;
    let cs = svd(&c)?;
    let (p, q) = (&cs.u, &cs.v);
    let want = f.u.determinant()?.signum() * f.v.determinant()?.signum();
    let have = q.determinant()?.signum() * p.determinant()?.signum();
    let mut q_adj = q.clone();
    if want * have < 0.0 {
        let last = q_adj.cols() - 1;
        for i in 0..q_adj.rows() {
            let x = q_adj.get(i, last);
            q_adj.set(i, last, -x);
        }
    }
    let rot = q_adj.matmul(&p.transpose())?;

    let mut w = ur.matmul(&vr.transpose())?;
    let free = un.matmul(&rot)?.matmul(&vn.transpose())?;
    for i in 0..d {
        for j in 0..d {
            let v = w.get(i, j) + free.get(i, j);
            w.set(i, j, v);
        }
    }
    Ok(w)
}

fn split_columns(m: &Matrix, k: usize) -> (Matrix, Matrix) {
    let left: Vec<Vec<f64>> = (0..k).map(|j| m.column(j)).collect();
    let right: Vec<Vec<f64>> = (k..m.cols()).map(|j| m.column(j)).collect();
    (
        Matrix::from_columns(m.rows(), &left),
        Matrix::from_columns(m.rows(), &right),
    )
}
