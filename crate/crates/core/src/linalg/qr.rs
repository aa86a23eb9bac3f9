use nalgebra::{DMatrix, DVector};

use super::Matrix;
use crate::error::{invalid, Result};

/// Thin Householder QR of an `m x n` matrix: `a = q * r` with `q` of shape
/// `m x k`, `r` of shape `k x n`, `k = min(m, n)`.
///
/// The diagonal of `r` is made nonnegative by flipping matching columns of
/// `q` and rows of `r`, which pins down the factorization for full-rank input.
pub fn householder_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return invalid("QR of an empty matrix");
    }
    if !a.is_finite() {
        return invalid("QR input has non-finite entries");
    }
    let k = m.min(n);
    let mut work = a.as_dmatrix().clone();
    let mut reflectors: Vec<Option<DVector<f64>>> = Vec::with_capacity(k);

    for j in 0..k {
        let x = work.view((j, j), (m - j, 1)).column(0).clone_owned();
        let norm = x.norm();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let v_norm = v.norm();
        if v_norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        v /= v_norm;
        let mut block = work.view_mut((j, j), (m - j, n - j));
        let w = block.tr_mul(&v);
        block.ger(-2.0, &v, &w, 1.0);
        reflectors.push(Some(v));
    }

    let mut r = DMatrix::zeros(k, n);
    for i in 0..k {
        for jj in i..n {
            r[(i, jj)] = work[(i, jj)];
        }
    }

    let mut q = DMatrix::zeros(m, k);
    for i in 0..k {
        q[(i, i)] = 1.0;
    }
    for j in (0..k).rev() {
        if let Some(v) = &reflectors[j] {
            let mut block = q.view_mut((j, 0), (m - j, k));
            let w = block.tr_mul(v);
            block.ger(-2.0, v, &w, 1.0);
        }
    }

    for i in 0..k {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    Ok((Matrix::from_dmatrix(q), Matrix::from_dmatrix(r)))
}

/// Orthonormal basis for the column space of a tall matrix (thin `q` factor).
pub fn orthonormalize_columns(a: &Matrix) -> Result<Matrix> {
    householder_qr(a).map(|(q, _)| q)
}
