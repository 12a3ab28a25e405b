//! Dense decompositions, computed with faer and returned as nalgebra matrices.

use crate::error::{Error, Result};
use crate::lowrank::Mat;

fn to_faer(m: &Mat) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Thin SVD `m = U diag(s) Vᵀ` with `s` nonincreasing and `min(d1, d2)` columns.
pub(crate) struct DenseSvd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub v: Mat,
}

pub(crate) fn svd(m: &Mat) -> Result<DenseSvd> {
    let f = to_faer(m);
    let svd = f
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    Ok(DenseSvd {
        u: from_faer(svd.U()),
        s: (0..s.nrows()).map(|k| s[k]).collect(),
        v: from_faer(svd.V()),
    })
}

pub(crate) fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    let mut s = to_faer(m)
        .singular_values()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Eigenvalues (nondecreasing) and orthonormal eigenvectors of a symmetric matrix.
pub(crate) fn symmetric_eigen(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    let eig = to_faer(m)
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigendecomposition did not converge: {e:?}")))?;
    let s = eig.S().column_vector();
    Ok(((0..s.nrows()).map(|k| s[k]).collect(), from_faer(eig.U())))
}
