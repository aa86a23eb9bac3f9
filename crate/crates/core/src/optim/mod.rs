//! Local optimizers: SGD, heavy-ball momentum, AdamW, and the projected
//! GaLore-style AdamW with its projector lifecycle.

mod galore;
mod projector;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

pub use galore::{galore_adamw_step, GaLoreSchedule, GaLoreState};
pub use projector::{
    lift_and_reproject, make_projector, project, project_back, projected_shape, reproject_buffers,
    side_for_shape, AdaptiveBasis, ProjectionMode, Projector, ProjectorSource, Side, VReprojection,
};

/// Where the ε floor enters the preconditioner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsPlacement {
    /// `m / (sqrt(v) + eps)`, the usual AdamW form.
    #[default]
    OutsideSqrt,
    /// `m / sqrt(v + eps)`, the form the containment analysis is stated in.
    InsideSqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bias_correction: bool,
    pub eps_placement: EpsPlacement,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            bias_correction: true,
            eps_placement: EpsPlacement::OutsideSqrt,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return invalid("eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return invalid("weight_decay must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseAdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: usize,
}

impl DenseAdamState {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseAdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub v_buf: Matrix,
    pub step: usize,
}

impl MomentumState {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MomentumState {
            v_buf: Matrix::zeros(rows, cols),
            step: 0,
        }
    }
}

fn check_shapes(what: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Rescales `g` onto the ball of radius `threshold` when it lies outside.
pub fn clip_by_norm(g: &Matrix, threshold: f64) -> Matrix {
    let norm = g.frobenius_norm();
    if norm > threshold && norm > 0.0 {
        g.scale(threshold / norm)
    } else {
        g.clone()
    }
}

pub fn sgd_step(theta: &Matrix, g: &Matrix, eta: f64) -> Result<Matrix> {
    check_shapes("sgd_step", theta, g)?;
    let mut out = theta.clone();
    out.axpy(-eta, g);
    Ok(out)
}

/// Heavy-ball step: `v' = mu * v + g`, `theta' = theta - eta * v'`.
pub fn momentum_step(
    theta: &Matrix,
    state: &MomentumState,
    g: &Matrix,
    eta: f64,
    mu: f64,
) -> Result<(Matrix, MomentumState)> {
    check_shapes("momentum_step", theta, g)?;
    check_shapes("momentum_step buffer", theta, &state.v_buf)?;
    if !(0.0..1.0).contains(&mu) {
        return invalid(format!("momentum coefficient must lie in [0, 1), got {mu}"));
    }
    let mut v_buf = state.v_buf.scale(mu);
    v_buf += g;
    let next = sgd_step(theta, &v_buf, eta)?;
    Ok((
        next,
        MomentumState {
            v_buf,
            step: state.step + 1,
        },
    ))
}

/// Averaged momentum: `m' = beta * m + (1 - beta) * g`, `theta' = theta - eta * m'`.
pub fn ema_momentum_step(
    theta: &Matrix,
    state: &MomentumState,
    g: &Matrix,
    eta: f64,
    beta: f64,
) -> Result<(Matrix, MomentumState)> {
    check_shapes("ema_momentum_step", theta, g)?;
    check_shapes("ema_momentum_step buffer", theta, &state.v_buf)?;
    if !(0.0..1.0).contains(&beta) {
        return invalid(format!("momentum coefficient must lie in [0, 1), got {beta}"));
    }
    let v_buf = state.v_buf.zip_map(g, |m, g| beta * m + (1.0 - beta) * g);
    let next = sgd_step(theta, &v_buf, eta)?;
    Ok((
        next,
        MomentumState {
            v_buf,
            step: state.step + 1,
        },
    ))
}

/// Moment update shared by dense and projected AdamW.
///
/// `t_m` and `t_v` are the 1-based step counts used for bias correction of the
/// first and second moment respectively. Returns `(m', v', update)`.
pub(crate) fn adam_moments(
    m: &Matrix,
    v: &Matrix,
    g: &Matrix,
    h: &AdamHyper,
    t: usize,
) -> (Matrix, Matrix, Matrix) {
    let m_next = m.zip_map(g, |m, g| h.beta1 * m + (1.0 - h.beta1) * g);
    let v_next = v.zip_map(g, |v, g| h.beta2 * v + (1.0 - h.beta2) * g * g);
    let (c_m, c_v) = if h.bias_correction {
        (
            1.0 - h.beta1.powi(t as i32),
            1.0 - h.beta2.powi(t as i32),
        )
    } else {
        (1.0, 1.0)
    };
    let update = m_next.zip_map(&v_next, |m, v| {
        let m_hat = m / c_m;
        let v_hat = v / c_v;
        match h.eps_placement {
            EpsPlacement::OutsideSqrt => m_hat / (v_hat.sqrt() + h.eps),
            EpsPlacement::InsideSqrt => m_hat / (v_hat + h.eps).sqrt(),
        }
    });
    (m_next, v_next, update)
}

pub fn adamw_step(
    theta: &Matrix,
    state: &DenseAdamState,
    g: &Matrix,
    h: &AdamHyper,
) -> Result<(Matrix, DenseAdamState)> {
    check_shapes("adamw_step", theta, g)?;
    check_shapes("adamw_step first moment", theta, &state.m)?;
    check_shapes("adamw_step second moment", theta, &state.v)?;
    if state.v.min_entry() < 0.0 {
        return Err(Error::InvalidState(
            "second moment has negative entries".into(),
        ));
    }
    let t = state.step + 1;
    let (m, v, update) = adam_moments(&state.m, &state.v, g, h, t);
    let next = apply_decoupled(theta, &update, h);
    Ok((
        next,
        DenseAdamState {
            m,
            v,
            step: t,
        },
    ))
}

/// `theta - lr * update - lr * weight_decay * theta`, decay using the old theta.
pub(crate) fn apply_decoupled(theta: &Matrix, update: &Matrix, h: &AdamHyper) -> Matrix {
    let mut next = theta.scale(1.0 - h.lr * h.weight_decay);
    next.axpy(-h.lr, update);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use proptest::prelude::*;

    fn scalar(x: f64) -> Matrix {
        Matrix::filled(1, 1, x)
    }

    #[test]
    fn sgd_examples() {
        let theta = SeededRng::new(1).gaussian_matrix(3, 2, 1.0);
        assert_eq!(sgd_step(&theta, &Matrix::zeros(3, 2), 0.5).unwrap(), theta);
        let one = sgd_step(&scalar(1.0), &scalar(2.0), 0.1).unwrap();
        assert!((one.get(0, 0) - 0.8).abs() < 1e-15);
        let g = SeededRng::new(2).gaussian_matrix(3, 2, 1.0);
        let twice = sgd_step(&sgd_step(&theta, &g, 0.1).unwrap(), &g, 0.1).unwrap();
        let once = sgd_step(&theta, &g.scale(2.0), 0.1).unwrap();
        assert!((&twice - &once).max_abs() < 1e-15);
        assert!(sgd_step(&theta, &scalar(1.0), 0.1).is_err());
    }

    #[test]
    fn momentum_examples() {
        let theta = scalar(0.0);
        let g = scalar(1.0);
        let s0 = MomentumState::zeros(1, 1);
        let (plain, _) = momentum_step(&theta, &s0, &g, 0.1, 0.0).unwrap();
        assert_eq!(plain, sgd_step(&theta, &g, 0.1).unwrap());

        let (t1, s1) = momentum_step(&theta, &s0, &g, 0.1, 0.5).unwrap();
        let (t2, _) = momentum_step(&t1, &s1, &g, 0.1, 0.5).unwrap();
        assert!((t2.get(0, 0) + 0.1 * 2.5).abs() < 1e-15);

        let coasting = MomentumState {
            v_buf: scalar(1.0),
            step: 3,
        };
        let (t, _) = momentum_step(&scalar(5.0), &coasting, &scalar(0.0), 1.0, 0.9).unwrap();
        assert!((t.get(0, 0) - 4.1).abs() < 1e-15);
        assert!(momentum_step(&theta, &s0, &g, 0.1, 1.0).is_err());
    }

    #[test]
    fn ema_momentum_examples() {
        let s0 = MomentumState::zeros(1, 1);
        // m1 = 0.5, theta1 = -0.05; m2 = 0.75, theta2 = -0.125.
        let (t1, s1) = ema_momentum_step(&scalar(0.0), &s0, &scalar(1.0), 0.1, 0.5).unwrap();
        let (t2, s2) = ema_momentum_step(&t1, &s1, &scalar(1.0), 0.1, 0.5).unwrap();
        assert!((t2.get(0, 0) + 0.125).abs() < 1e-15);
        assert!((s2.v_buf.get(0, 0) - 0.75).abs() < 1e-15);
        let (plain, _) = ema_momentum_step(&scalar(2.0), &s0, &scalar(1.0), 0.1, 0.0).unwrap();
        assert_eq!(plain, scalar(1.9));
    }

    #[test]
    fn adamw_pure_decay() {
        let h = AdamHyper {
            lr: 0.1,
            weight_decay: 0.3,
            ..AdamHyper::default()
        };
        let theta = SeededRng::new(3).gaussian_matrix(2, 2, 1.0);
        let (next, _) = adamw_step(&theta, &DenseAdamState::zeros(2, 2), &Matrix::zeros(2, 2), &h).unwrap();
        assert!((&next - &theta.scale(1.0 - 0.03)).max_abs() < 1e-15);
    }

    #[test]
    fn adamw_first_bias_corrected_step() {
        let h = AdamHyper {
            lr: 0.1,
            ..AdamHyper::default()
        };
        let (next, state) =
            adamw_step(&scalar(1.0), &DenseAdamState::zeros(1, 1), &scalar(2.0), &h).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((next.get(0, 0) - expected).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamw_rejects_negative_second_moment() {
        let mut s = DenseAdamState::zeros(1, 1);
        s.v.set(0, 0, -1.0);
        let err = adamw_step(&scalar(0.0), &s, &scalar(1.0), &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    /// Textbook Adam written against flat vectors, used as an oracle.
    fn textbook_adam(theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    #[test]
    fn adamw_matches_textbook_oracle() {
        let h = AdamHyper {
            lr: 0.01,
            ..AdamHyper::default()
        };
        let mut rng = SeededRng::new(50);
        let mut theta = rng.gaussian_matrix(3, 4, 1.0);
        let mut state = DenseAdamState::zeros(3, 4);
        let mut flat = theta.to_row_major();
        let mut m = vec![0.0; 12];
        let mut v = vec![0.0; 12];
        for t in 1..=50 {
            let g = rng.gaussian_matrix(3, 4, 1.0);
            let (next, s) = adamw_step(&theta, &state, &g, &h).unwrap();
            theta = next;
            state = s;
            textbook_adam(&mut flat, &mut m, &mut v, &g.to_row_major(), t, 0.01);
        }
        for (a, b) in theta.to_row_major().iter().zip(&flat) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eps_inside_sqrt_form() {
        let h = AdamHyper {
            lr: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.25,
            bias_correction: false,
            eps_placement: EpsPlacement::InsideSqrt,
            ..AdamHyper::default()
        };
        let (next, _) = adamw_step(&scalar(0.0), &DenseAdamState::zeros(1, 1), &scalar(1.0), &h).unwrap();
        assert!((next.get(0, 0) + 1.0 / 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let g = Matrix::from_row_slice(1, 2, &[3.0, 4.0]).unwrap();
        assert!((clip_by_norm(&g, 1.0).frobenius_norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_by_norm(&g, 10.0), g);
    }

    proptest! {
        #[test]
        fn zero_gradient_fixes_theta(seed in any::<u64>(), eta in 1e-4f64..1.0) {
            let theta = SeededRng::new(seed).gaussian_matrix(3, 3, 1.0);
            let zero = Matrix::zeros(3, 3);
            prop_assert_eq!(&sgd_step(&theta, &zero, eta).unwrap(), &theta);
            let (mt, _) = momentum_step(&theta, &MomentumState::zeros(3, 3), &zero, eta, 0.9).unwrap();
            prop_assert_eq!(&mt, &theta);
            let h = AdamHyper { lr: eta, ..AdamHyper::default() };
            let (at, _) = adamw_step(&theta, &DenseAdamState::zeros(3, 3), &zero, &h).unwrap();
            prop_assert_eq!(&at, &theta);
        }

        #[test]
        fn second_moment_stays_nonnegative(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let mut theta = rng.gaussian_matrix(2, 3, 1.0);
            let mut s = DenseAdamState::zeros(2, 3);
            for _ in 0..10 {
                let g = rng.gaussian_matrix(2, 3, 5.0);
                let (t, ns) = adamw_step(&theta, &s, &g, &AdamHyper::default()).unwrap();
                theta = t;
                s = ns;
                prop_assert!(s.v.min_entry() >= 0.0);
            }
        }
    }
}
