use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{effective_weight, LoraParams};
use crate::error::{invalid, Result};
use crate::linalg::{derive_seed, orthonormalize_columns, Matrix, SeededRng};
use crate::optim::{make_projector, project, project_back, ProjectionMode};

/// Constants of the two-basin landscape. Every field is a tunable default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub dim: usize,
    /// Rank of the initial LoRA subspace that defines the aligned direction.
    pub lora_rank: usize,
    /// Distance of the flat basin's center from the origin.
    pub separation: f64,
    pub flat_curvature: f64,
    /// Curvature of the sharp valley across its long axis.
    pub sharp_curvature: f64,
    /// Curvature of the sharp valley along the aligned direction.
    pub along_curvature: f64,
    pub tau: f64,
    /// Coefficient of the aligned direction in the reference start point.
    pub reference_aligned: f64,
    pub init_noise_std: f64,
    pub geometry_seed: u64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            dim: 16,
            lora_rank: 2,
            separation: 3.0,
            flat_curvature: 0.1,
            sharp_curvature: 10.0,
            along_curvature: 0.1,
            tau: 0.5,
            reference_aligned: 2.0,
            init_noise_std: 0.07,
            geometry_seed: 12345,
        }
    }
}

/// Softmin of a flat basin at `separation · orthogonal_dir` and a sharp valley
/// at the origin that is shallow only along `aligned_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftminLandscape {
    pub dim: usize,
    pub tau: f64,
    pub flat_center: Matrix,
    pub flat_curvature: f64,
    pub sharp_curvature: f64,
    pub along_curvature: f64,
    /// Unit-norm rank-1 direction inside the initial LoRA row space.
    pub aligned_dir: Matrix,
    /// Unit-norm rank-1 direction orthogonal to it and to that row space.
    pub orthogonal_dir: Matrix,
    /// Initial LoRA down projection, `lora_rank x dim`.
    pub lora_a0: Matrix,
    pub reference: Matrix,
    pub noise_std: f64,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn remove_component(v: &mut [f64], dir: &[f64]) {
    let c: f64 = v.iter().zip(dir).map(|(a, b)| a * b).sum();
    for (x, d) in v.iter_mut().zip(dir) {
        *x -= c * d;
    }
}

impl SoftminLandscape {
    pub fn new(cfg: &LandscapeConfig) -> Result<Self> {
        let d = cfg.dim;
        let r = cfg.lora_rank;
        if d < 2 || r == 0 || r >= d {
            return invalid(format!("landscape needs 1 <= lora_rank < dim, got {r} and {d}"));
        }
        if !(cfg.tau > 0.0) {
            return invalid("landscape tau must be positive");
        }
        if !(cfg.flat_curvature > 0.0 && cfg.sharp_curvature > 0.0 && cfg.along_curvature > 0.0) {
            return invalid("landscape curvatures must be positive");
        }
        let mut rng = SeededRng::new(cfg.geometry_seed);
        let a0 = rng.gaussian_matrix(r, d, 1.0 / (r as f64).sqrt());
        let row_basis = orthonormalize_columns(&a0.transpose())?;
        let in_span = row_basis.column(0);
        let mut out_of_span = rng.gaussian_vec(d, 1.0);
        for j in 0..r {
            remove_component(&mut out_of_span, &row_basis.column(j));
        }
        let out_of_span = unit(out_of_span);
        let left1 = unit(rng.gaussian_vec(d, 1.0));
        let mut left2 = rng.gaussian_vec(d, 1.0);
        remove_component(&mut left2, &left1);
        let left2 = unit(left2);

        let aligned = Matrix::column_vector(&left1).dot_tr(&Matrix::column_vector(&in_span));
        let orthogonal = Matrix::column_vector(&left2).dot_tr(&Matrix::column_vector(&out_of_span));
        Ok(SoftminLandscape {
            dim: d,
            tau: cfg.tau,
            flat_center: orthogonal.scale(cfg.separation),
            flat_curvature: cfg.flat_curvature,
            sharp_curvature: cfg.sharp_curvature,
            along_curvature: cfg.along_curvature,
            reference: aligned.scale(cfg.reference_aligned),
            aligned_dir: aligned,
            orthogonal_dir: orthogonal,
            lora_a0: a0,
            noise_std: cfg.init_noise_std,
        })
    }

    /// Flat-basin loss and gradient.
    pub fn flat_basin(&self, w: &Matrix) -> (f64, Matrix) {
        let diff = w - &self.flat_center;
        let loss = 0.5 * self.flat_curvature * diff.frobenius_dot(&diff);
        (loss, diff.scale(self.flat_curvature))
    }

    /// Sharp-valley loss and gradient.
    pub fn sharp_valley(&self, w: &Matrix) -> (f64, Matrix) {
        let along = w.frobenius_dot(&self.aligned_dir);
        let across = w - &self.aligned_dir.scale(along);
        let loss = 0.5
            * (self.sharp_curvature * across.frobenius_dot(&across)
                + self.along_curvature * along * along);
        let grad = &across.scale(self.sharp_curvature)
            + &self.aligned_dir.scale(self.along_curvature * along);
        (loss, grad)
    }

    /// Distances to the flat and sharp basin centers.
    pub fn basin_distances(&self, w: &Matrix) -> (f64, f64) {
        ((w - &self.flat_center).frobenius_norm(), w.frobenius_norm())
    }
}

/// `-tau · log(exp(-L1/tau) + exp(-L2/tau))` and its gradient, evaluated with a
/// shifted log-sum-exp.
pub fn softmin_loss(w: &Matrix, land: &SoftminLandscape) -> (f64, Matrix) {
    assert_eq!(w.shape(), (land.dim, land.dim), "softmin_loss: shape mismatch");
    let (l1, g1) = land.flat_basin(w);
    let (l2, g2) = land.sharp_valley(w);
    let low = l1.min(l2);
    let w1 = (-(l1 - low) / land.tau).exp();
    let w2 = (-(l2 - low) / land.tau).exp();
    let total = w1 + w2;
    let loss = low - land.tau * total.ln();
    let grad = &g1.scale(w1 / total) + &g2.scale(w2 / total);
    (loss, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapMethod {
    FullSgd,
    /// Gradient descent on LoRA factors started from the landscape's `lora_a0`.
    Lora,
    /// Projected gradient descent with periodic top-r SVD bases.
    Galore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub steps: usize,
    pub lr: f64,
    pub rank: usize,
    pub refresh_period: usize,
    /// Terminal points farther than this from both centers count as unconverged.
    pub converge_radius: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            steps: 500,
            lr: 0.05,
            rank: 2,
            refresh_period: 10,
            converge_radius: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basin {
    Flat,
    Sharp,
    Unconverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRates {
    pub flat_rate: f64,
    pub sharp_rate: f64,
    pub unconverged_rate: f64,
}

/// Runs one trial from `reference + noise` and returns the terminal point.
pub fn run_trial(
    method: TrapMethod,
    land: &SoftminLandscape,
    cfg: &TrialConfig,
    seed: u64,
) -> Result<Matrix> {
    let d = land.dim;
    let start = &land.reference + &SeededRng::new(seed).gaussian_matrix(d, d, land.noise_std);
    match method {
        TrapMethod::FullSgd => {
            let mut w = start;
            for _ in 0..cfg.steps {
                let (_, g) = softmin_loss(&w, land);
                w.axpy(-cfg.lr, &g);
            }
            Ok(w)
        }
        TrapMethod::Lora => {
            let a0 = land.lora_a0.row_block(0, cfg.rank.min(land.lora_a0.rows()));
            let mut p = LoraParams {
                b: Matrix::zeros(d, a0.rows()),
                a: a0,
                w0: start,
                scaling: 1.0,
            };
            for _ in 0..cfg.steps {
                let (_, g) = softmin_loss(&effective_weight(&p)?, land);
                let (grad_a, grad_b) = p.factor_grads(&g);
                p.a.axpy(-cfg.lr, &grad_a);
                p.b.axpy(-cfg.lr, &grad_b);
            }
            effective_weight(&p)
        }
        TrapMethod::Galore => {
            let mut w = start;
            let mut projector = None;
            for t in 0..cfg.steps {
                let (_, g) = softmin_loss(&w, land);
                if projector.is_none() || (cfg.refresh_period > 0 && t % cfg.refresh_period == 0) {
                    projector = Some(make_projector(&g, cfg.rank, ProjectionMode::Svd)?);
                }
                let p = projector.as_ref().expect("set above");
                w.axpy(-cfg.lr, &project_back(&project(&g, p)?, p)?);
            }
            Ok(w)
        }
    }
}

pub fn classify(w: &Matrix, land: &SoftminLandscape, converge_radius: f64) -> Basin {
    let (to_flat, to_sharp) = land.basin_distances(w);
    if to_flat.min(to_sharp) > converge_radius {
        Basin::Unconverged
    } else if to_flat < to_sharp {
        Basin::Flat
    } else {
        Basin::Sharp
    }
}

/// Terminal-basin frequencies over `n_trials` seeded starts. Trial `i` uses
/// `derive_seed(seed, i)`, so results do not depend on the thread count.
pub fn run_landscape_trials(
    n_trials: usize,
    method: TrapMethod,
    land: &SoftminLandscape,
    cfg: &TrialConfig,
    seed: u64,
) -> Result<TrialRates> {
    if n_trials == 0 {
        return invalid("run_landscape_trials needs at least one trial");
    }
    if cfg.rank == 0 || cfg.rank > land.dim {
        return invalid(format!("trial rank {} invalid for dim {}", cfg.rank, land.dim));
    }
    let basins = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            run_trial(method, land, cfg, derive_seed(seed, i as u64))
                .map(|w| classify(&w, land, cfg.converge_radius))
        })
        .collect::<Result<Vec<_>>>()?;
    let rate = |b: Basin| basins.iter().filter(|&&x| x == b).count() as f64 / n_trials as f64;
    Ok(TrialRates {
        flat_rate: rate(Basin::Flat),
        sharp_rate: rate(Basin::Sharp),
        unconverged_rate: rate(Basin::Unconverged),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn land() -> SoftminLandscape {
        SoftminLandscape::new(&LandscapeConfig::default()).unwrap()
    }

    #[test]
    fn directions_are_orthonormal_and_placed() {
        let l = land();
        assert!(l.aligned_dir.frobenius_dot(&l.orthogonal_dir).abs() < 1e-10);
        assert!((l.aligned_dir.frobenius_norm() - 1.0).abs() < 1e-12);
        assert!((l.orthogonal_dir.frobenius_norm() - 1.0).abs() < 1e-12);
        // Aligned rows live in the LoRA row space; orthogonal rows avoid it.
        let a = &l.lora_a0;
        let proj = |m: &Matrix| {
            let q = orthonormalize_columns(&a.transpose()).unwrap();
            m.dot(&q).dot_tr(&q)
        };
        assert!((&proj(&l.aligned_dir) - &l.aligned_dir).max_abs() < 1e-12);
        assert!(proj(&l.orthogonal_dir).max_abs() < 1e-12);
    }

    #[test]
    fn flat_center_is_the_flat_minimum() {
        let l = land();
        let (loss, grad) = softmin_loss(&l.flat_center, &l);
        let (l2, _) = l.sharp_valley(&l.flat_center);
        assert!(l2 > 40.0);
        assert!(loss.abs() < 1e-12);
        assert!(grad.max_abs() < 1e-12);
    }

    #[test]
    fn small_tau_approaches_hard_min() {
        let cfg = LandscapeConfig {
            tau: 1e-4,
            ..LandscapeConfig::default()
        };
        let l = SoftminLandscape::new(&cfg).unwrap();
        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let w = rng.gaussian_matrix(16, 16, 0.5);
            let (loss, _) = softmin_loss(&w, &l);
            let hard = l.flat_basin(&w).0.min(l.sharp_valley(&w).0);
            assert!((loss - hard).abs() < 1e-3, "{loss} vs {hard}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let l = land();
        let mut rng = SeededRng::new(9);
        let h = 1e-6;
        for _ in 0..20 {
            // Mix of points near the reference, where both basins contribute.
            let w = &l.reference.scale(rng.uniform()) + &rng.gaussian_matrix(16, 16, 0.1);
            let (_, g) = softmin_loss(&w, &l);
            let mut fd = Matrix::zeros(16, 16);
            for i in 0..16 {
                for j in 0..16 {
                    let mut plus = w.clone();
                    plus.set(i, j, w.get(i, j) + h);
                    let mut minus = w.clone();
                    minus.set(i, j, w.get(i, j) - h);
                    fd.set(i, j, (softmin_loss(&plus, &l).0 - softmin_loss(&minus, &l).0) / (2.0 * h));
                }
            }
            let rel = (&g - &fd).frobenius_norm() / g.frobenius_norm().max(1e-12);
            assert!(rel < 1e-5, "relative error {rel}");
        }
    }

    #[test]
    fn trials_are_deterministic() {
        let l = land();
        let cfg = TrialConfig {
            steps: 50,
            ..TrialConfig::default()
        };
        let a = run_landscape_trials(8, TrapMethod::Galore, &l, &cfg, 5).unwrap();
        let b = run_landscape_trials(8, TrapMethod::Galore, &l, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.flat_rate + a.sharp_rate + a.unconverged_rate <= 1.0 + 1e-12);
    }

    #[test]
    fn classification_uses_nearest_center() {
        let l = land();
        assert_eq!(classify(&l.flat_center, &l, 1.5), Basin::Flat);
        assert_eq!(classify(&Matrix::zeros(16, 16), &l, 1.5), Basin::Sharp);
        assert_eq!(classify(&l.flat_center.scale(-3.0), &l, 1.5), Basin::Unconverged);
    }
}
