use serde::{Deserialize, Serialize};

use super::Federation;
use crate::adapters::check_weights;
use crate::error::{invalid, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::optim::clip_by_norm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadEnsembleConfig {
    pub rows: usize,
    pub cols: usize,
    pub clients: usize,
    /// Per-entry curvatures are log-uniform in `[curvature_min, curvature_max]`.
    pub curvature_min: f64,
    pub curvature_max: f64,
    /// One curvature field for every client instead of one per client.
    pub shared_curvature: bool,
    /// Standard deviation of client centers around the origin.
    pub center_scale: f64,
    /// Per-entry standard deviation of gradient noise.
    pub noise_std: f64,
    /// Norm threshold applied to sampled gradients.
    pub clip: Option<f64>,
    /// Client weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for QuadEnsembleConfig {
    fn default() -> Self {
        QuadEnsembleConfig {
            rows: 8,
            cols: 8,
            clients: 4,
            curvature_min: 0.5,
            curvature_max: 2.0,
            shared_curvature: false,
            center_scale: 1.0,
            noise_std: 0.0,
            clip: None,
            weights: None,
        }
    }
}

/// Clients `F_i(θ) = ½ Σ h_i ⊙ (θ − c_i)²` with elementwise curvature `h_i`,
/// weighted into `f = Σ p_i F_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadEnsemble {
    pub centers: Vec<Matrix>,
    pub curvatures: Vec<Matrix>,
    pub weights: Vec<f64>,
    /// Minimizer of `f`.
    pub optimum: Matrix,
    pub optimum_loss: f64,
    /// Largest curvature over all clients.
    pub smoothness: f64,
    /// Smallest curvature of the weighted average Hessian.
    pub pl_constant: f64,
    /// `(H, B)` with `Σ p_i ‖∇F_i‖² ≤ H² + B² ‖∇f‖²` everywhere.
    pub dissimilarity_floor: f64,
    pub dissimilarity_growth: f64,
    pub noise_std: f64,
    pub clip: Option<f64>,
}

/// A sampled client gradient and the terms it decomposes into.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    /// What the optimizer sees: `∇F_i + ξ`, clipped when the ensemble clips.
    pub grad: Matrix,
    pub client_grad: Matrix,
    pub global_grad: Matrix,
    /// `∇F_i − ∇f`.
    pub drift: Matrix,
    pub noise: Matrix,
}

impl QuadEnsemble {
    pub fn generate(cfg: &QuadEnsembleConfig, seed: u64) -> Result<Self> {
        if cfg.rows == 0 || cfg.cols == 0 || cfg.clients == 0 {
            return invalid("quadratic ensemble needs positive shape and client count");
        }
        if !(cfg.curvature_min > 0.0 && cfg.curvature_max >= cfg.curvature_min) {
            return invalid("curvature range must satisfy 0 < min <= max");
        }
        let weights = match &cfg.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / cfg.clients as f64; cfg.clients],
        };
        let mut rng = SeededRng::new(seed);
        let (lo, hi) = (cfg.curvature_min.ln(), cfg.curvature_max.ln());
        let draw_curvature =
            |rng: &mut SeededRng| Matrix::from_fn(cfg.rows, cfg.cols, |_, _| (lo + (hi - lo) * rng.uniform()).exp());
        let shared = cfg.shared_curvature.then(|| draw_curvature(&mut rng));
        let mut centers = Vec::with_capacity(cfg.clients);
        let mut curvatures = Vec::with_capacity(cfg.clients);
        for _ in 0..cfg.clients {
            centers.push(rng.gaussian_matrix(cfg.rows, cfg.cols, cfg.center_scale));
            curvatures.push(match &shared {
                Some(h) => h.clone(),
                None => draw_curvature(&mut rng),
            });
        }
        Self::from_parts(centers, curvatures, weights, cfg.noise_std, cfg.clip)
    }

    /// Builds an ensemble from explicit centers and curvatures and derives its
    /// constants.
    pub fn from_parts(
        centers: Vec<Matrix>,
        curvatures: Vec<Matrix>,
        weights: Vec<f64>,
        noise_std: f64,
        clip: Option<f64>,
    ) -> Result<Self> {
        let m = centers.len();
        if m == 0 || curvatures.len() != m {
            return invalid("need one curvature field per client center");
        }
        check_weights(&weights, m)?;
        let shape = centers[0].shape();
        if centers.iter().chain(&curvatures).any(|x| x.shape() != shape) {
            return invalid("client centers and curvatures must share one shape");
        }
        if curvatures.iter().any(|h| h.min_entry() <= 0.0) {
            return invalid("curvatures must be positive");
        }
        if !(noise_std >= 0.0) || clip.is_some_and(|g| !(g > 0.0)) {
            return invalid("noise_std must be nonnegative and clip positive");
        }
        let (rows, cols) = shape;
        let mut mean_curv = Matrix::zeros(rows, cols);
        let mut weighted_target = Matrix::zeros(rows, cols);
        for ((c, h), &p) in centers.iter().zip(&curvatures).zip(&weights) {
            mean_curv.axpy(p, h);
            weighted_target.axpy(p, &h.hadamard(c));
        }
        let optimum = weighted_target.zip_map(&mean_curv, |t, h| t / h);
        let smoothness = curvatures
            .iter()
            .map(|h| h.max_abs())
            .fold(0.0, f64::max);
        let pl_constant = mean_curv.min_entry();

        // Per entry, ∇F_i = a_i g + b_i with g = ∇f, a_i = h_i / h̄, b_i = h_i (θ* − c_i),
        // Σ p a = 1 and Σ p b = 0. Then Σ p (a g + b)² = A g² + 2 S g + C and
        // 2 S g ≤ ρ g² + S² / ρ gives B² = max A + ρ, H² = Σ (C + S² / ρ).
        let mut max_a: f64 = 1.0;
        let mut sum_c = 0.0;
        let mut sum_s2 = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let (mut a2, mut s, mut c2) = (0.0, 0.0, 0.0);
                for ((c, h), &p) in centers.iter().zip(&curvatures).zip(&weights) {
                    let a = h.get(i, j) / mean_curv.get(i, j);
                    let b = h.get(i, j) * (optimum.get(i, j) - c.get(i, j));
                    a2 += p * a * a;
                    s += p * a * b;
                    c2 += p * b * b;
                }
                max_a = max_a.max(a2);
                sum_c += c2;
                sum_s2 += s * s;
            }
        }
        let reference_grad = clip.unwrap_or(1.0);
        let rho = if sum_s2 > 0.0 { sum_s2.sqrt() / reference_grad } else { 0.0 };
        let floor_sq = sum_c + if rho > 0.0 { sum_s2 / rho } else { 0.0 };
        let mut ens = QuadEnsemble {
            centers,
            curvatures,
            weights,
            optimum,
            optimum_loss: 0.0,
            smoothness,
            pl_constant,
            dissimilarity_floor: floor_sq.sqrt(),
            dissimilarity_growth: (max_a + rho).sqrt(),
            noise_std,
            clip,
        };
        ens.optimum_loss = ens.global_loss(&ens.optimum);
        Ok(ens)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.centers[0].shape()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn client_loss(&self, i: usize, theta: &Matrix) -> f64 {
        let diff = theta - &self.centers[i];
        0.5 * self.curvatures[i].hadamard(&diff).frobenius_dot(&diff)
    }

    pub fn client_gradient(&self, i: usize, theta: &Matrix) -> Matrix {
        self.curvatures[i].hadamard(&(theta - &self.centers[i]))
    }

    pub fn global_loss(&self, theta: &Matrix) -> f64 {
        (0..self.centers.len())
            .map(|i| self.weights[i] * self.client_loss(i, theta))
            .sum()
    }

    pub fn global_gradient(&self, theta: &Matrix) -> Matrix {
        let mut g = Matrix::zeros(theta.rows(), theta.cols());
        for i in 0..self.centers.len() {
            g.axpy(self.weights[i], &self.client_gradient(i, theta));
        }
        g
    }

    /// Gradient oracle for client `i` with noise drawn from `rng`.
    pub fn sample_gradient(&self, i: usize, theta: &Matrix, rng: &mut SeededRng) -> GradSample {
        let client_grad = self.client_gradient(i, theta);
        let global_grad = self.global_gradient(theta);
        let noise = if self.noise_std > 0.0 {
            rng.gaussian_matrix(theta.rows(), theta.cols(), self.noise_std)
        } else {
            Matrix::zeros(theta.rows(), theta.cols())
        };
        let raw = &client_grad + &noise;
        let grad = match self.clip {
            Some(g) => clip_by_norm(&raw, g),
            None => raw,
        };
        GradSample {
            grad,
            drift: &client_grad - &global_grad,
            client_grad,
            global_grad,
            noise,
        }
    }
}

/// Sampled gradient of client `i` at `theta` with noise seeded by `batch_seed`.
pub fn quad_grad(theta: &Matrix, i: usize, ens: &QuadEnsemble, batch_seed: u64) -> Result<GradSample> {
    if i >= ens.centers.len() {
        return invalid(format!("client {i} out of range for {} clients", ens.centers.len()));
    }
    if theta.shape() != ens.shape() {
        return invalid(format!("theta {:?} vs ensemble {:?}", theta.shape(), ens.shape()));
    }
    Ok(ens.sample_gradient(i, theta, &mut SeededRng::new(batch_seed)))
}

impl Federation for QuadEnsemble {
    fn num_clients(&self) -> usize {
        self.centers.len()
    }

    fn shape(&self) -> (usize, usize) {
        QuadEnsemble::shape(self)
    }

    fn client_loss(&self, i: usize, theta: &Matrix) -> f64 {
        QuadEnsemble::client_loss(self, i, theta)
    }

    fn stochastic_gradient(&self, i: usize, theta: &Matrix, rng: &mut SeededRng) -> Matrix {
        self.sample_gradient(i, theta, rng).grad
    }

    fn global_loss(&self, theta: &Matrix) -> f64 {
        QuadEnsemble::global_loss(self, theta)
    }

    fn global_gradient(&self, theta: &Matrix) -> Matrix {
        QuadEnsemble::global_gradient(self, theta)
    }
}
