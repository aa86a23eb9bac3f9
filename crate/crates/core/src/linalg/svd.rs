use faer::Mat;
use serde::{Deserialize, Serialize};

use super::qr::orthonormalize_columns;
use super::{Matrix, SeededRng};
use crate::error::{invalid, Error, Result};

/// Relative cutoff used by [`numeric_rank`] and the rank-based diagnostics.
pub const RANK_RTOL: f64 = 1e-10;

/// Truncated or full singular value decomposition `a ≈ u · diag(s) · vᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    /// Left singular vectors as columns (`m x rank`).
    pub u: Matrix,
    /// Singular values, nonincreasing.
    pub s: Vec<f64>,
    /// Right singular vectors as columns (`n x rank`).
    pub v: Matrix,
    pub rank: usize,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.u.rows(), self.rank, |i, j| self.u.get(i, j) * self.s[j]);
        scaled.dot_tr(&self.v)
    }

    /// Keeps the leading `k` components.
    pub fn truncated(&self, k: usize) -> SvdFactors {
        let k = k.min(self.rank);
        SvdFactors {
            u: self.u.columns(0, k),
            s: self.s[..k].to_vec(),
            v: self.v.columns(0, k),
            rank: k,
        }
    }
}

fn check_input(a: &Matrix) -> Result<()> {
    if a.rows() == 0 || a.cols() == 0 {
        return invalid(format!("SVD of a {}x{} matrix", a.rows(), a.cols()));
    }
    if !a.is_finite() {
        return invalid("SVD input has non-finite entries");
    }
    Ok(())
}

fn numeric_failure(a: &Matrix, message: &str) -> Error {
    Error::NumericFailure {
        message: message.to_string(),
        rows: a.rows(),
        cols: a.cols(),
        frobenius: a.frobenius_norm(),
        max_abs: a.max_abs(),
    }
}

pub(crate) fn to_faer(a: &Matrix) -> Mat<f64> {
    let d = a.as_dmatrix();
    Mat::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)])
}

/// Deterministic SVD, optionally truncated to the top `k` components.
pub fn svd(a: &Matrix, k: Option<usize>) -> Result<SvdFactors> {
    check_input(a)?;
    let min_dim = a.rows().min(a.cols());
    let k = match k {
        Some(k) if k > min_dim => {
            return invalid(format!("requested {k} components of a rank-{min_dim} shape"))
        }
        Some(k) => k,
        None => min_dim,
    };
    let dec = to_faer(a)
        .thin_svd()
        .map_err(|_| numeric_failure(a, "SVD did not converge"))?;
    let (u_full, v_full) = (dec.U(), dec.V());
    let values = dec.S().column_vector();

    let mut order: Vec<usize> = (0..min_dim).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order.truncate(k);

    let u = Matrix::from_fn(a.rows(), k, |i, j| u_full[(i, order[j])]);
    let v = Matrix::from_fn(a.cols(), k, |i, j| v_full[(i, order[j])]);
    let s = order.iter().map(|&i| values[i].max(0.0)).collect();
    Ok(SvdFactors { u, s, v, rank: k })
}

/// Singular values in nonincreasing order, without computing vectors.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    check_input(a)?;
    let mut s: Vec<f64> = to_faer(a)
        .singular_values()
        .map_err(|_| numeric_failure(a, "SVD did not converge"))?
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Eigen-decomposition of a symmetric matrix: eigenvalues in nonincreasing
/// order and the matching orthonormal eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    check_input(a)?;
    if a.rows() != a.cols() {
        return invalid("symmetric eigen-decomposition needs a square matrix");
    }
    let n = a.rows();
    let dec = to_faer(a)
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|_| numeric_failure(a, "symmetric eigen-decomposition did not converge"))?;
    let values = dec.S().column_vector();
    let vectors = dec.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let sorted = order.iter().map(|&i| values[i]).collect();
    Ok((sorted, Matrix::from_fn(n, n, |i, j| vectors[(i, order[j])])))
}

/// Randomized range-finder SVD with power iterations.
///
/// Samples `a·Ω` with a Gaussian `Ω` of width `r + oversample` drawn from
/// `seed`, re-orthonormalizes between power iterations, then takes an exact SVD
/// of the small projected matrix.
pub fn randomized_svd(
    a: &Matrix,
    r: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<SvdFactors> {
    check_input(a)?;
    let width = r + oversample;
    if r == 0 || width > a.rows().min(a.cols()) {
        return invalid(format!(
            "randomized SVD needs 1 <= r and r + oversample <= min dims (r={r}, oversample={oversample}, shape {:?})",
            a.shape()
        ));
    }
    let mut rng = SeededRng::new(seed);
    let omega = rng.gaussian_matrix(a.cols(), width, 1.0);
    let mut q = orthonormalize_columns(&a.dot(&omega))?;
    for _ in 0..power_iters {
        let z = orthonormalize_columns(&a.tr_dot(&q))?;
        q = orthonormalize_columns(&a.dot(&z))?;
    }
    let b = q.tr_dot(a);
    let small = svd(&b, None)?;
    Ok(SvdFactors {
        u: q.dot(&small.u.columns(0, r)),
        s: small.s[..r].to_vec(),
        v: small.v.columns(0, r),
        rank: r,
    })
}

/// `r x n` matrix with orthonormal rows derived only from `(seed, n, r)`.
///
/// Fills an `n x r` Gaussian matrix row-major from [`SeededRng`], takes the
/// Householder `q` factor with nonnegative `diag(r)`, and returns its transpose.
pub fn seeded_orthonormal(seed: u64, n: usize, r: usize) -> Result<Matrix> {
    if r == 0 || r > n {
        return invalid(format!("seeded basis needs 1 <= r <= n (r={r}, n={n})"));
    }
    let mut rng = SeededRng::new(seed);
    let g = rng.gaussian_matrix(n, r, 1.0);
    Ok(orthonormalize_columns(&g)?.transpose())
}

/// Best rank-`r` approximation in Frobenius norm.
pub fn rank_r_truncate(a: &Matrix, r: usize) -> Result<Matrix> {
    if r == 0 {
        return Ok(Matrix::zeros(a.rows(), a.cols()));
    }
    if r >= a.rows().min(a.cols()) {
        check_input(a)?;
        return Ok(a.clone());
    }
    Ok(svd(a, Some(r))?.reconstruct())
}

/// Root-sum-square of the singular values beyond index `r`.
pub fn tail_distance(a: &Matrix, r: usize) -> Result<f64> {
    let s = singular_values(a)?;
    Ok(s.iter().skip(r).map(|x| x * x).sum::<f64>().sqrt())
}

/// Codimension of the rank-`r` manifold in `d_out x d_in` matrices.
pub fn codimension(d_out: usize, d_in: usize, r: usize) -> Result<usize> {
    if r > d_out.min(d_in) {
        return invalid(format!("rank {r} exceeds min({d_out}, {d_in})"));
    }
    Ok((d_out - r) * (d_in - r))
}

/// Number of singular values above `rtol · σ₁`; zero for the zero matrix.
pub fn numeric_rank(a: &Matrix, rtol: f64) -> Result<usize> {
    let s = singular_values(a)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rtol * top).count())
}

/// Principal angles (radians, ascending) between the column spans of two
/// matrices with orthonormal columns.
pub fn principal_angles(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return invalid("principal angles need bases in the same ambient space");
    }
    let cosines = singular_values(&a.tr_dot(b))?;
    Ok(cosines.iter().map(|c| c.clamp(0.0, 1.0).acos()).collect())
}

/// Largest principal angle between equal-dimensional column spans, computed
/// from the sine side so that small angles keep full precision.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid("max principal angle needs bases of equal shape");
    }
    let residual = b - &a.dot(&a.tr_dot(b));
    let sine = singular_values(&residual)?[0];
    Ok(sine.clamp(0.0, 1.0).asin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn residual_to_identity(q: &Matrix) -> f64 {
        (&q.tr_dot(q) - &Matrix::identity(q.cols())).frobenius_norm()
    }

    fn low_rank(seed: u64, m: usize, n: usize, r: usize) -> Matrix {
        let mut rng = SeededRng::new(seed);
        rng.gaussian_matrix(m, r, 1.0).dot(&rng.gaussian_matrix(r, n, 1.0))
    }

    #[test]
    fn identity_and_diagonal_values() {
        let f = svd(&Matrix::identity(3), Some(3)).unwrap();
        assert_eq!(f.s.len(), 3);
        for x in f.s {
            assert!((x - 1.0).abs() < 1e-14);
        }
        let d = Matrix::from_diagonal(&[1.0, 3.0, 2.0]);
        let f = svd(&d, None).unwrap();
        for (x, want) in f.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((x - want).abs() < 1e-14);
        }
    }

    #[test]
    fn gaussian_reconstruction() {
        let a = SeededRng::new(1).gaussian_matrix(8, 6, 1.0);
        let f = svd(&a, None).unwrap();
        assert!((&f.reconstruct() - &a).frobenius_norm() < 1e-10 * a.frobenius_norm());
        assert!(residual_to_identity(&f.u) < 1e-10);
        assert!(residual_to_identity(&f.v) < 1e-10);
    }

    #[test]
    fn wide_input_is_supported() {
        let a = SeededRng::new(2).gaussian_matrix(3, 9, 1.0);
        let f = svd(&a, None).unwrap();
        assert_eq!(f.u.shape(), (3, 3));
        assert_eq!(f.v.shape(), (9, 3));
        assert!((&f.reconstruct() - &a).frobenius_norm() < 1e-10 * a.frobenius_norm());
    }

    #[test]
    fn svd_errors() {
        assert!(matches!(svd(&Matrix::zeros(0, 3), None), Err(Error::InvalidInput(_))));
        assert!(svd(&Matrix::identity(3), Some(4)).is_err());
        let mut a = Matrix::identity(2);
        a.set(0, 1, f64::INFINITY);
        assert!(matches!(svd(&a, None), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn randomized_recovers_exact_rank() {
        let a = low_rank(3, 30, 20, 3);
        let f = randomized_svd(&a, 3, 2, 1, 11).unwrap();
        assert!((&f.reconstruct() - &a).frobenius_norm() < 1e-8 * a.frobenius_norm());
        let exact = svd(&a, Some(3)).unwrap();
        assert!(max_principal_angle(&exact.u, &f.u).unwrap() < 1e-6);
    }

    #[test]
    fn randomized_is_deterministic() {
        let a = SeededRng::new(8).gaussian_matrix(20, 15, 1.0);
        let x = randomized_svd(&a, 4, 3, 2, 5).unwrap();
        let y = randomized_svd(&a, 4, 3, 2, 5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn randomized_tracks_top_subspace_of_random_decaying_matrix() {
        // Random singular vectors with geometric spectrum 0.8^j.
        let mut rng = SeededRng::new(64);
        let u = orthonormalize_columns(&rng.gaussian_matrix(64, 64, 1.0)).unwrap();
        let v = orthonormalize_columns(&rng.gaussian_matrix(64, 64, 1.0)).unwrap();
        let spectrum: Vec<f64> = (0..64).map(|j| 0.8f64.powi(j)).collect();
        let a = u.dot(&Matrix::from_diagonal(&spectrum)).dot_tr(&v);
        let exact = svd(&a, Some(8)).unwrap();
        let approx = randomized_svd(&a, 8, 10, 2, 99).unwrap();
        let angle = max_principal_angle(&exact.u, &approx.u).unwrap();
        assert!(angle < 1e-3, "angle {angle}");
    }

    #[test]
    fn randomized_rejects_wide_sketch() {
        let a = Matrix::identity(5);
        assert!(randomized_svd(&a, 3, 3, 0, 0).is_err());
    }

    #[test]
    fn seeded_basis_properties() {
        let p = seeded_orthonormal(42, 8, 3).unwrap();
        assert_eq!(p.shape(), (3, 8));
        assert!((&p.dot_tr(&p) - &Matrix::identity(3)).frobenius_norm() < 1e-12);
        assert_eq!(p, seeded_orthonormal(42, 8, 3).unwrap());
        assert_ne!(p, seeded_orthonormal(43, 8, 3).unwrap());
        let square = seeded_orthonormal(7, 5, 5).unwrap();
        let det = square.as_dmatrix().determinant();
        assert!((det.abs() - 1.0).abs() < 1e-10);
        assert!(seeded_orthonormal(1, 3, 4).is_err());
    }

    #[test]
    fn truncation_examples() {
        let d = Matrix::from_diagonal(&[3.0, 2.0, 1.0]);
        let t = rank_r_truncate(&d, 2).unwrap();
        assert!((&t - &Matrix::from_diagonal(&[3.0, 2.0, 0.0])).frobenius_norm() < 1e-12);
        assert!(rank_r_truncate(&d, 0).unwrap().is_zero());
        let r1 = low_rank(5, 6, 4, 1);
        let t1 = rank_r_truncate(&r1, 1).unwrap();
        assert!((&t1 - &r1).frobenius_norm() < 1e-10 * r1.frobenius_norm());
    }

    #[test]
    fn tail_distance_examples() {
        let d = Matrix::from_diagonal(&[3.0, 2.0, 1.0]);
        assert!((tail_distance(&d, 2).unwrap() - 1.0).abs() < 1e-12);
        let r1 = low_rank(6, 5, 5, 1);
        assert!(tail_distance(&r1, 1).unwrap() < 1e-10 * r1.frobenius_norm());
        let a = SeededRng::new(10).gaussian_matrix(8, 8, 1.0);
        let direct = (&a - &rank_r_truncate(&a, 4).unwrap()).frobenius_norm();
        assert!((tail_distance(&a, 4).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn codimension_examples() {
        assert_eq!(codimension(4, 4, 4).unwrap(), 0);
        assert_eq!(codimension(768, 768, 8).unwrap(), 577_600);
        assert_eq!(codimension(4, 6, 2).unwrap(), 8);
        assert!(codimension(3, 5, 4).is_err());
    }

    #[test]
    fn numeric_rank_counts() {
        assert_eq!(numeric_rank(&Matrix::zeros(3, 3), RANK_RTOL).unwrap(), 0);
        assert_eq!(numeric_rank(&low_rank(7, 9, 7, 3), RANK_RTOL).unwrap(), 3);
    }

    #[test]
    fn principal_angles_of_known_planes() {
        let e = Matrix::identity(3);
        let a = e.columns(0, 1);
        let theta: f64 = 0.3;
        let b = Matrix::column_vector(&[theta.cos(), theta.sin(), 0.0]);
        let angles = principal_angles(&a, &b).unwrap();
        assert!((angles[0] - theta).abs() < 1e-12);
        assert!((max_principal_angle(&a, &b).unwrap() - theta).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn svd_invariants(seed in any::<u64>(), m in 1usize..9, n in 1usize..9) {
            let a = SeededRng::new(seed).gaussian_matrix(m, n, 1.0);
            let f = svd(&a, None).unwrap();
            prop_assert!(residual_to_identity(&f.u) < 1e-10);
            prop_assert!(residual_to_identity(&f.v) < 1e-10);
            prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(f.s.iter().all(|&x| x >= 0.0));
            prop_assert!((&f.reconstruct() - &a).frobenius_norm() <= 1e-10 * a.frobenius_norm().max(1e-300));
        }

        #[test]
        fn tail_zero_iff_low_rank(seed in any::<u64>(), r in 1usize..4) {
            let a = low_rank(seed, 7, 6, r);
            let top = singular_values(&a).unwrap()[0];
            prop_assert!(tail_distance(&a, r).unwrap() < 1e-10 * top);
            prop_assert!(tail_distance(&a, r - 1).unwrap() > 1e-10 * top);
        }

        #[test]
        fn seeded_is_orthonormal(seed in any::<u64>(), n in 1usize..12, frac in 0.0f64..1.0) {
            let r = 1 + ((n - 1) as f64 * frac) as usize;
            let p = seeded_orthonormal(seed, n, r).unwrap();
            prop_assert!((&p.dot_tr(&p) - &Matrix::identity(r)).frobenius_norm() < 1e-12);
        }
    }
}
