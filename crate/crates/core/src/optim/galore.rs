use serde::{Deserialize, Serialize};

use super::projector::{
    lift_and_reproject, make_projector, project, project_back, projected_shape, reproject_buffers,
    AdaptiveBasis, ProjectionMode, Projector, VReprojection,
};
use super::{adam_moments, apply_decoupled, AdamHyper};
use crate::error::{invalid, Error, Result};
use crate::linalg::{derive_seed, Matrix};

/// Projector schedule for one parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaLoreSchedule {
    pub rank: usize,
    /// Refresh every this many steps, starting at step 0; 0 disables refreshes.
    pub refresh_period: usize,
    /// Number of data-driven refreshes before switching to seeded bases.
    pub adaptive_refreshes: usize,
    pub adaptive_basis: AdaptiveBasis,
    /// First seed consumed once the schedule turns to seeded bases.
    pub first_seed: u64,
    pub v_reprojection: VReprojection,
}

impl Default for GaLoreSchedule {
    fn default() -> Self {
        GaLoreSchedule {
            rank: 4,
            refresh_period: 200,
            adaptive_refreshes: 1,
            adaptive_basis: AdaptiveBasis::Svd,
            first_seed: 0,
            v_reprojection: VReprojection::Clamp,
        }
    }
}

/// Optimizer state of a projected AdamW block. Buffers have the projected
/// gradient shape, so memory is linear in the block's long side times `rank`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaLoreState {
    pub projector: Option<Projector>,
    pub m_proj: Matrix,
    pub v_proj: Matrix,
    pub step: usize,
    pub refresh_period: usize,
    pub adaptive_refreshes_remaining: usize,
    pub next_seed: u64,
    pub rank: usize,
    pub adaptive_basis: AdaptiveBasis,
    pub v_reprojection: VReprojection,
}

impl GaLoreState {
    /// Fresh state for a `rows x cols` block; the first step builds the projector.
    pub fn new(rows: usize, cols: usize, schedule: &GaLoreSchedule) -> Result<Self> {
        if schedule.rank == 0 || schedule.rank > rows.min(cols) {
            return invalid(format!(
                "rank {} invalid for a {rows}x{cols} block",
                schedule.rank
            ));
        }
        let (pr, pc) = projected_shape(rows, cols, schedule.rank);
        Ok(GaLoreState {
            projector: None,
            m_proj: Matrix::zeros(pr, pc),
            v_proj: Matrix::zeros(pr, pc),
            step: 0,
            refresh_period: schedule.refresh_period,
            adaptive_refreshes_remaining: schedule.adaptive_refreshes,
            next_seed: schedule.first_seed,
            rank: schedule.rank,
            adaptive_basis: schedule.adaptive_basis,
            v_reprojection: schedule.v_reprojection,
        })
    }

    /// State that starts from an explicit projector.
    pub fn with_projector(
        rows: usize,
        cols: usize,
        projector: Projector,
        schedule: &GaLoreSchedule,
    ) -> Result<Self> {
        let mut state = Self::new(rows, cols, &GaLoreSchedule {
            rank: projector.rank(),
            ..*schedule
        })?;
        let probe = Matrix::zeros(rows, cols);
        if project(&probe, &projector)?.shape() != state.m_proj.shape() {
            return invalid("projector does not match the block shape");
        }
        state.projector = Some(projector);
        Ok(state)
    }

    fn refresh(&mut self, g: &Matrix) -> Result<()> {
        let mode = if self.adaptive_refreshes_remaining > 0 {
            self.adaptive_refreshes_remaining -= 1;
            match self.adaptive_basis {
                AdaptiveBasis::Svd => ProjectionMode::Svd,
                AdaptiveBasis::Rsvd => ProjectionMode::Rsvd {
                    seed: derive_seed(self.next_seed, self.step as u64),
                },
            }
        } else {
            let seed = self.next_seed;
            self.next_seed = self.next_seed.wrapping_add(1);
            ProjectionMode::Seeded(seed)
        };
        let mut fresh = make_projector(g, self.rank, mode)?;
        if let Some(old) = self.projector.take() {
            fresh.refresh_count = old.refresh_count + 1;
            let (m, v) = if old.side == fresh.side {
                reproject_buffers(&self.m_proj, &self.v_proj, &old, &fresh, self.v_reprojection)?
            } else {
                lift_and_reproject(&self.m_proj, &self.v_proj, &old, &fresh, self.v_reprojection)?
            };
            self.m_proj = m;
            self.v_proj = v;
        } else {
            fresh.refresh_count = 1;
        }
        self.projector = Some(fresh);
        Ok(())
    }
}

/// One projected AdamW step with decoupled weight decay applied in the
/// ambient shape.
pub fn galore_adamw_step(
    theta: &Matrix,
    state: &GaLoreState,
    g: &Matrix,
    h: &AdamHyper,
) -> Result<(Matrix, GaLoreState)> {
    if theta.shape() != g.shape() {
        return invalid(format!(
            "galore_adamw_step: theta {:?} vs gradient {:?}",
            theta.shape(),
            g.shape()
        ));
    }
    let expected = projected_shape(theta.rows(), theta.cols(), state.rank);
    if state.m_proj.shape() != expected || state.v_proj.shape() != expected {
        return Err(Error::InvalidState(format!(
            "projected buffers must be {expected:?}"
        )));
    }
    if state.v_proj.min_entry() < 0.0 {
        return Err(Error::InvalidState(
            "projected second moment has negative entries".into(),
        ));
    }
    let mut next = state.clone();
    if next.refresh_period > 0 && next.step % next.refresh_period == 0 {
        next.refresh(g)?;
    }
    let projector = next.projector.as_ref().ok_or_else(|| {
        Error::InvalidState("no projector and refreshes are disabled".into())
    })?;
    let g_proj = project(g, projector)?;
    let t = next.step + 1;
    let (m, v, update_proj) = adam_moments(&next.m_proj, &next.v_proj, &g_proj, h, t);
    let update = project_back(&update_proj, projector)?;
    let theta_next = apply_decoupled(theta, &update, h);
    next.m_proj = m;
    next.v_proj = v;
    next.step = t;
    Ok((theta_next, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use crate::optim::{adamw_step, DenseAdamState, ProjectorSource, Side};

    fn quadratic_grad(theta: &Matrix, target: &Matrix, scale: &Matrix) -> Matrix {
        scale.hadamard(&(theta - target))
    }

    #[test]
    fn identity_basis_matches_dense_adamw() {
        let n = 8;
        let mut rng = SeededRng::new(1);
        let target = rng.gaussian_matrix(n, n, 1.0);
        let scale = rng.gaussian_matrix(n, n, 1.0).map(|x| 0.5 + x.abs());
        let h = AdamHyper {
            lr: 0.01,
            weight_decay: 0.05,
            ..AdamHyper::default()
        };
        let p = Projector::from_basis(Matrix::identity(n), Side::Right, ProjectorSource::Seeded(0)).unwrap();
        let schedule = GaLoreSchedule {
            refresh_period: 0,
            ..GaLoreSchedule::default()
        };
        let mut gs = GaLoreState::with_projector(n, n, p, &schedule).unwrap();
        let mut ds = DenseAdamState::zeros(n, n);
        let mut a = rng.gaussian_matrix(n, n, 1.0);
        let mut b = a.clone();
        for _ in 0..100 {
            let (na, ns) = galore_adamw_step(&a, &gs, &quadratic_grad(&a, &target, &scale), &h).unwrap();
            let (nb, nd) = adamw_step(&b, &ds, &quadratic_grad(&b, &target, &scale), &h).unwrap();
            a = na;
            gs = ns;
            b = nb;
            ds = nd;
            assert!((&a - &b).max_abs() <= 1e-12);
        }
    }

    #[test]
    fn same_basis_refresh_is_invisible() {
        // A rank-1 gradient direction that never changes: every SVD refresh
        // returns the same canonically signed basis, so the change of basis is the identity.
        let u = Matrix::column_vector(&[1.0, 2.0, -1.0, 0.5]);
        let w = Matrix::column_vector(&[0.5, -1.0, 2.0, 1.0]);
        let direction = u.dot_tr(&w);
        let h = AdamHyper {
            lr: 0.05,
            ..AdamHyper::default()
        };
        let grad = |theta: &Matrix| direction.scale(1.0 + theta.frobenius_dot(&direction));
        let run = |period: usize| {
            let schedule = GaLoreSchedule {
                rank: 1,
                refresh_period: period,
                adaptive_refreshes: usize::MAX,
                ..GaLoreSchedule::default()
            };
            let mut s = GaLoreState::new(4, 4, &schedule).unwrap();
            let mut theta = Matrix::zeros(4, 4);
            if period == 0 {
                let p = make_projector(&direction, 1, ProjectionMode::Svd).unwrap();
                s = GaLoreState::with_projector(4, 4, p, &schedule).unwrap();
            }
            for _ in 0..30 {
                let (t, ns) = galore_adamw_step(&theta, &s, &grad(&theta), &h).unwrap();
                theta = t;
                s = ns;
            }
            theta
        };
        let refreshed = run(3);
        let fixed = run(0);
        let gap = (&refreshed - &fixed).max_abs();
        assert!(gap < 1e-12, "gap {gap}");
    }

    #[test]
    fn schedule_switches_to_consecutive_seeds() {
        let schedule = GaLoreSchedule {
            rank: 2,
            refresh_period: 2,
            adaptive_refreshes: 2,
            first_seed: 40,
            ..GaLoreSchedule::default()
        };
        let mut rng = SeededRng::new(3);
        let mut s = GaLoreState::new(6, 6, &schedule).unwrap();
        let mut theta = Matrix::zeros(6, 6);
        let mut sources = Vec::new();
        for _ in 0..10 {
            let g = rng.gaussian_matrix(6, 6, 1.0);
            let (t, ns) = galore_adamw_step(&theta, &s, &g, &AdamHyper::default()).unwrap();
            theta = t;
            s = ns;
            let p = s.projector.as_ref().unwrap();
            assert!(p.orthonormality_residual() < 1e-10);
            sources.push(p.source);
        }
        assert_eq!(sources[0], ProjectorSource::Svd);
        assert_eq!(sources[2], ProjectorSource::Svd);
        assert_eq!(sources[4], ProjectorSource::Seeded(40));
        assert_eq!(sources[6], ProjectorSource::Seeded(41));
        assert_eq!(sources[8], ProjectorSource::Seeded(42));
        assert_eq!(s.next_seed, 43);
        assert_eq!(s.projector.as_ref().unwrap().refresh_count, 5);
    }

    #[test]
    fn buffers_stay_projected_and_nonnegative() {
        let schedule = GaLoreSchedule {
            rank: 3,
            refresh_period: 4,
            adaptive_refreshes: 1,
            ..GaLoreSchedule::default()
        };
        let mut rng = SeededRng::new(4);
        let mut s = GaLoreState::new(20, 12, &schedule).unwrap();
        let mut theta = rng.gaussian_matrix(20, 12, 1.0);
        for _ in 0..20 {
            let g = rng.gaussian_matrix(20, 12, 1.0);
            let (t, ns) = galore_adamw_step(&theta, &s, &g, &AdamHyper::default()).unwrap();
            theta = t;
            s = ns;
            assert_eq!(s.v_proj.shape(), (20, 3));
            assert!(s.v_proj.min_entry() >= 0.0);
        }
        let wide = GaLoreState::new(5, 9, &schedule).unwrap();
        assert_eq!(wide.m_proj.shape(), (3, 9));
    }

    #[test]
    fn zero_gradient_only_decays() {
        let schedule = GaLoreSchedule {
            rank: 2,
            refresh_period: 0,
            ..GaLoreSchedule::default()
        };
        let p = make_projector(&Matrix::zeros(4, 4), 2, ProjectionMode::Seeded(3)).unwrap();
        let s = GaLoreState::with_projector(4, 4, p, &schedule).unwrap();
        let theta = SeededRng::new(5).gaussian_matrix(4, 4, 1.0);
        let h = AdamHyper {
            lr: 0.1,
            weight_decay: 0.2,
            ..AdamHyper::default()
        };
        let (t, _) = galore_adamw_step(&theta, &s, &Matrix::zeros(4, 4), &h).unwrap();
        assert!((&t - &theta.scale(0.98)).max_abs() < 1e-15);
    }

    #[test]
    fn missing_projector_is_an_error() {
        let schedule = GaLoreSchedule {
            refresh_period: 0,
            rank: 1,
            ..GaLoreSchedule::default()
        };
        let s = GaLoreState::new(3, 3, &schedule).unwrap();
        let err = galore_adamw_step(&Matrix::zeros(3, 3), &s, &Matrix::zeros(3, 3), &AdamHyper::default());
        assert!(matches!(err, Err(Error::InvalidState(_))));
    }
}
