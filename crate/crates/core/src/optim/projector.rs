use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{randomized_svd, seeded_orthonormal, svd, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `m x r` basis applied from the left; used when rows < cols.
    Left,
    /// `r x n` basis applied from the right; used when rows >= cols.
    Right,
}

/// How a projector's basis was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorSource {
    Svd,
    Rsvd,
    Seeded(u64),
}

/// Data-driven basis method used during the adaptive part of a schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveBasis {
    #[default]
    Svd,
    Rsvd,
}

/// Requested construction for [`make_projector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionMode {
    Svd,
    /// Randomized SVD with sketch seed; oversampling is capped by the block shape.
    Rsvd { seed: u64 },
    Seeded(u64),
}

/// What happens to the projected second moment on a basis change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VReprojection {
    /// Same linear change of basis as the first moment, then clamp at 0.
    #[default]
    Clamp,
    /// Discard the second moment.
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub basis: Matrix,
    pub side: Side,
    pub source: ProjectorSource,
    pub refresh_count: usize,
}

const RSVD_OVERSAMPLE: usize = 5;
const RSVD_POWER_ITERS: usize = 2;

/// Right iff `rows >= cols`, square blocks included.
pub fn side_for_shape(rows: usize, cols: usize) -> Side {
    if rows >= cols {
        Side::Right
    } else {
        Side::Left
    }
}

/// Shape of a projected `rows x cols` gradient at rank `r`.
pub fn projected_shape(rows: usize, cols: usize, r: usize) -> (usize, usize) {
    match side_for_shape(rows, cols) {
        Side::Right => (rows, r),
        Side::Left => (r, cols),
    }
}

impl Projector {
    pub fn rank(&self) -> usize {
        match self.side {
            Side::Right => self.basis.rows(),
            Side::Left => self.basis.cols(),
        }
    }

    /// Dimension of the ambient space the basis lives in.
    pub fn ambient_dim(&self) -> usize {
        match self.side {
            Side::Right => self.basis.cols(),
            Side::Left => self.basis.rows(),
        }
    }

    /// Basis with orthonormal columns regardless of side.
    pub fn column_basis(&self) -> Matrix {
        match self.side {
            Side::Right => self.basis.transpose(),
            Side::Left => self.basis.clone(),
        }
    }

    pub fn orthonormality_residual(&self) -> f64 {
        let q = self.column_basis();
        (&q.tr_dot(&q) - &Matrix::identity(q.cols())).frobenius_norm()
    }

    /// Projector from an explicit basis with orthonormal rows (right side) or
    /// columns (left side).
    pub fn from_basis(basis: Matrix, side: Side, source: ProjectorSource) -> Result<Projector> {
        let p = Projector {
            basis,
            side,
            source,
            refresh_count: 0,
        };
        if p.orthonormality_residual() > 1e-10 {
            return invalid("projector basis is not orthonormal");
        }
        Ok(p)
    }
}

/// Builds a rank-`r` projector for a gradient block of `g`'s shape.
pub fn make_projector(g: &Matrix, r: usize, mode: ProjectionMode) -> Result<Projector> {
    let (rows, cols) = g.shape();
    let min_dim = rows.min(cols);
    if r == 0 || r > min_dim {
        return invalid(format!("projector rank {r} invalid for a {rows}x{cols} block"));
    }
    let side = side_for_shape(rows, cols);
    let (basis, source) = match mode {
        ProjectionMode::Seeded(seed) => {
            let n = if side == Side::Right { cols } else { rows };
            let p = seeded_orthonormal(seed, n, r)?;
            let basis = if side == Side::Right { p } else { p.transpose() };
            (basis, ProjectorSource::Seeded(seed))
        }
        ProjectionMode::Svd | ProjectionMode::Rsvd { .. } => {
            let (factors, source) = match mode {
                ProjectionMode::Rsvd { seed } => {
                    let oversample = RSVD_OVERSAMPLE.min(min_dim - r);
                    (
                        randomized_svd(g, r, oversample, RSVD_POWER_ITERS, seed)?,
                        ProjectorSource::Rsvd,
                    )
                }
                _ => (svd(g, Some(r))?, ProjectorSource::Svd),
            };
            let basis = match side {
                Side::Right => canonical_signs(&factors.v).transpose(),
                Side::Left => canonical_signs(&factors.u),
            };
            (basis, source)
        }
    };
    Ok(Projector {
        basis,
        side,
        source,
        refresh_count: 0,
    })
}

/// Flips each column so its largest-magnitude entry is positive, making the
/// basis a function of the subspace rather than of the SVD routine's signs.
fn canonical_signs(cols: &Matrix) -> Matrix {
    let mut out = cols.clone();
    for j in 0..cols.cols() {
        let mut pivot = 0.0_f64;
        for i in 0..cols.rows() {
            let x = cols.get(i, j);
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        if pivot < 0.0 {
            for i in 0..cols.rows() {
                out.set(i, j, -cols.get(i, j));
            }
        }
    }
    out
}

fn shape_error(what: &str, m: &Matrix, p: &Projector) -> Error {
    Error::InvalidInput(format!(
        "{what}: matrix {:?} incompatible with {:?} basis {:?}",
        m.shape(),
        p.side,
        p.basis.shape()
    ))
}

/// Right: `g · basisᵀ`; left: `basisᵀ · g`.
pub fn project(g: &Matrix, p: &Projector) -> Result<Matrix> {
    match p.side {
        Side::Right if g.cols() == p.basis.cols() => Ok(g.dot_tr(&p.basis)),
        Side::Left if g.rows() == p.basis.rows() => Ok(p.basis.tr_dot(g)),
        _ => Err(shape_error("project", g, p)),
    }
}

/// Right: `u · basis`; left: `basis · u`.
pub fn project_back(u: &Matrix, p: &Projector) -> Result<Matrix> {
    match p.side {
        Side::Right if u.cols() == p.basis.rows() => Ok(u.dot(&p.basis)),
        Side::Left if u.rows() == p.basis.cols() => Ok(p.basis.dot(u)),
        _ => Err(shape_error("project_back", u, p)),
    }
}

/// Change of basis for projected buffers between two same-side, same-rank
/// projectors. The second moment is clamped at 0 or reset per `policy`.
pub fn reproject_buffers(
    m: &Matrix,
    v: &Matrix,
    old: &Projector,
    new: &Projector,
    policy: VReprojection,
) -> Result<(Matrix, Matrix)> {
    if old.side != new.side {
        return Err(Error::Unsupported(
            "projector side changed; use lift_and_reproject".into(),
        ));
    }
    if old.rank() != new.rank() || old.basis.shape() != new.basis.shape() {
        return Err(Error::Unsupported(
            "projector rank or ambient size changed".into(),
        ));
    }
    if m.shape() != v.shape() {
        return invalid("moment buffers disagree in shape");
    }
    let (m_new, v_lin) = match old.side {
        Side::Right => {
            let change = old.basis.dot_tr(&new.basis);
            if m.cols() != change.rows() {
                return Err(shape_error("reproject_buffers", m, old));
            }
            (m.dot(&change), v.dot(&change))
        }
        Side::Left => {
            let change = new.basis.tr_dot(&old.basis);
            if m.rows() != change.cols() {
                return Err(shape_error("reproject_buffers", m, old));
            }
            (change.dot(m), change.dot(v))
        }
    };
    let v_new = match policy {
        VReprojection::Clamp => v_lin.clamp_min(0.0),
        VReprojection::Reset => Matrix::zeros(v.rows(), v.cols()),
    };
    Ok((m_new, v_new))
}

/// Fallback for a side change: lift both buffers to the ambient shape with the
/// old basis, then project with the new one.
pub fn lift_and_reproject(
    m: &Matrix,
    v: &Matrix,
    old: &Projector,
    new: &Projector,
    policy: VReprojection,
) -> Result<(Matrix, Matrix)> {
    let m_new = project(&project_back(m, old)?, new)?;
    let v_new = match policy {
        VReprojection::Clamp => project(&project_back(v, old)?, new)?.clamp_min(0.0),
        VReprojection::Reset => Matrix::zeros(m_new.rows(), m_new.cols()),
    };
    Ok((m_new, v_new))
}
