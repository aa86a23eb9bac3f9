use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};

/// Dense real matrix backed by `nalgebra::DMatrix<f64>`.
///
/// The public constructors and accessors speak row-major; storage order is an
/// implementation detail. Zero-sized matrices are representable (an empty joint
/// basis, for example) but are rejected by the factorizations.
#[derive(Clone, PartialEq)]
pub struct Matrix(DMatrix<f64>);

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Matrix(DMatrix::identity(n, n))
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix(DMatrix::from_element(rows, cols, value))
    }

    /// Builds a matrix from `rows * cols` values in row-major order.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Matrix(DMatrix::from_row_slice(rows, cols, data)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return invalid("ragged rows");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_row_slice(n_rows, n_cols, &flat)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Matrix(DMatrix::from_fn(rows, cols, f))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    /// Column vector (n x 1).
    pub fn column_vector(values: &[f64]) -> Self {
        Matrix(DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn from_dmatrix(m: DMatrix<f64>) -> Self {
        Matrix(m)
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_dmatrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.0[(i, j)] = value;
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let (r, c) = self.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.0.column(j).iter().copied().collect()
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        Matrix(self.0.columns(start, end - start).into_owned())
    }

    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix(self.0.rows(start, end - start).into_owned())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix(self.0.transpose())
    }

    /// Matrix product. Panics on inner-dimension mismatch; callers at API
    /// boundaries validate shapes first.
    pub fn dot(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols(),
            other.rows(),
            "matmul shape mismatch: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        Matrix(&self.0 * &other.0)
    }

    /// `selfᵀ · other`. Transposes the smaller operand explicitly so the
    /// product runs on the blocked kernel.
    pub fn tr_dot(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows(), other.rows(), "tr_dot shape mismatch");
        if self.len() > other.len() {
            Matrix((other.0.transpose() * &self.0).transpose())
        } else {
            Matrix(self.0.transpose() * &other.0)
        }
    }

    /// `self · otherᵀ`.
    pub fn dot_tr(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols(), other.cols(), "dot_tr shape mismatch");
        Matrix(&self.0 * other.0.transpose())
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        Matrix(self.0.component_mul(&other.0))
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Matrix {
        Matrix(self.0.map(f))
    }

    pub fn zip_map(&self, other: &Matrix, f: impl FnMut(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Matrix(self.0.zip_map(&other.0, f))
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix(&self.0 * alpha)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        self.0.zip_apply(&other.0, |x, y| *x += alpha * y);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "frobenius_dot shape mismatch");
        self.0.dot(&other.0)
    }

    pub fn sum(&self) -> f64 {
        self.0.sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }

    pub fn min_entry(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn clamp_min(&self, floor: f64) -> Matrix {
        self.map(|x| x.max(floor))
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows().max(1) as f64;
        (0..self.cols()).map(|j| self.0.column(j).sum() / n).collect()
    }

    /// Subtracts `means[j]` from every entry of column `j`.
    pub fn subtract_column_means(&self, means: &[f64]) -> Matrix {
        Matrix::from_fn(self.rows(), self.cols(), |i, j| self.0[(i, j)] - means[j])
    }

    /// Horizontal concatenation of blocks sharing a row count.
    pub fn hcat(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = match blocks.first() {
            Some(b) => b.rows(),
            None => return invalid("hcat of zero blocks"),
        };
        if blocks.iter().any(|b| b.rows() != rows) {
            return invalid("hcat blocks disagree on row count");
        }
        let cols: usize = blocks.iter().map(Matrix::cols).sum();
        let mut out = DMatrix::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            out.columns_mut(offset, b.cols()).copy_from(&b.0);
            offset += b.cols();
        }
        Ok(Matrix(out))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{:?}", self.shape())?;
        if self.len() <= 64 {
            write!(f, " {:?}", self.to_row_major())?;
        }
        Ok(())
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Matrix(&self.0 + &rhs.0)
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Matrix(&self.0 - &rhs.0)
    }
}

impl Add for Matrix {
    type Output = Matrix;
    fn add(self, rhs: Matrix) -> Matrix {
        &self + &rhs
    }
}

impl Sub for Matrix {
    type Output = Matrix;
    fn sub(self, rhs: Matrix) -> Matrix {
        &self - &rhs
    }
}

impl AddAssign<&Matrix> for Matrix {
    fn add_assign(&mut self, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        self.0 += &rhs.0;
    }
}

impl SubAssign<&Matrix> for Matrix {
    fn sub_assign(&mut self, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        self.0 -= &rhs.0;
    }
}

impl Neg for &Matrix {
    type Output = Matrix;
    fn neg(self) -> Matrix {
        Matrix(-&self.0)
    }
}

impl Mul<f64> for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: f64) -> Matrix {
        self.scale(rhs)
    }
}

impl Mul<&Matrix> for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.dot(rhs)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr {
            rows: self.rows(),
            cols: self.cols(),
            data: self.to_row_major(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(deserializer)?;
        Matrix::from_row_slice(repr.rows, repr.cols, &repr.data).map_err(serde::de::Error::custom)
    }
}
