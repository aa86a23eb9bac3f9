//! Empirical checks of the high-probability containment framework: the
//! sub-Gaussian noise envelope, explicit local-containment radii for SGD,
//! momentum and AdamW, and the in-expectation drift bound for local SGD.
//!
//! The optimizers here follow the analysis forms: momentum is an exponential
//! moving average and AdamW has no bias correction, no weight decay and the
//! preconditioner `(v + ε)^{-1/2}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{derive_seed, Matrix, SeededRng};
use crate::optim::{adamw_step, clip_by_norm, ema_momentum_step, AdamHyper, DenseAdamState, EpsPlacement, MomentumState};
use crate::tasks::QuadEnsemble;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryOptimizer {
    Sgd,
    Momentum,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhpParams {
    /// Per-coordinate sub-Gaussian scale of the gradient noise.
    pub sigma: f64,
    pub dim: usize,
    pub clients: usize,
    pub rounds: usize,
    pub steps: usize,
    pub delta: f64,
    /// Gradient norm bound, enforced by clipping in the checks.
    pub grad_bound: f64,
    pub smoothness: f64,
    /// Norm of the first-moment mismatch at the start of each round.
    pub bias_m: f64,
    /// Frobenius norm of the second-moment mismatch at the start of each round.
    pub bias_v: f64,
    /// Entry of the reference second moment at the start of each round.
    pub reference_v0: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for WhpParams {
    fn default() -> Self {
        WhpParams {
            sigma: 1.0,
            dim: 8,
            clients: 4,
            rounds: 5,
            steps: 5,
            delta: 0.05,
            grad_bound: 1.0,
            smoothness: 1.0,
            bias_m: 0.0,
            bias_v: 0.0,
            reference_v0: 0.0,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-2,
        }
    }
}

impl WhpParams {
    /// Parameters matching `ens`: noise scale, dimension, client count,
    /// smoothness and clip threshold.
    pub fn for_ensemble(ens: &QuadEnsemble, rounds: usize, steps: usize, delta: f64, lr: f64) -> Result<Self> {
        let Some(clip) = ens.clip else {
            return invalid("containment checks need a clipped ensemble");
        };
        Ok(WhpParams {
            sigma: ens.noise_std,
            dim: ens.dim(),
            clients: ens.centers.len(),
            rounds,
            steps,
            delta,
            grad_bound: clip,
            smoothness: ens.smoothness,
            lr,
            ..WhpParams::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.dim == 0 || self.clients == 0 || self.rounds == 0 || self.steps == 0 {
            return invalid("dim, clients, rounds and steps must be positive");
        }
        let nonneg = [
            ("sigma", self.sigma),
            ("grad_bound", self.grad_bound),
            ("smoothness", self.smoothness),
            ("bias_m", self.bias_m),
            ("bias_v", self.bias_v),
            ("reference_v0", self.reference_v0),
            ("lr", self.lr),
        ];
        if let Some((name, _)) = nonneg.iter().find(|(_, x)| !(*x >= 0.0 && x.is_finite())) {
            return invalid(format!("{name} must be a nonnegative number"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return invalid("eps must be positive");
        }
        Ok(())
    }

    /// `η L T`.
    pub fn step_size_product(&self) -> f64 {
        self.lr * self.smoothness * self.steps as f64
    }

    fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: 0.0,
            bias_correction: false,
            eps_placement: EpsPlacement::InsideSqrt,
        }
    }
}

/// `σ √(2d ln(2dMKT/δ))`: with probability at least `1 − δ` every noise vector
/// of every client, round and step has norm at most this.
pub fn noise_envelope(p: &WhpParams) -> Result<f64> {
    p.validate()?;
    let d = p.dim as f64;
    let count = 2.0 * d * (p.clients * p.rounds * p.steps) as f64;
    Ok(p.sigma * (2.0 * d * (count / p.delta).ln()).sqrt())
}

/// Radius of the tube around the reference trajectory that holds with
/// probability at least `1 − δ`. Requires `η L T ≤ 1/2`.
pub fn containment_radius(p: &WhpParams, optimizer: TheoryOptimizer) -> Result<f64> {
    let noise = noise_envelope(p)?;
    if p.step_size_product() > 0.5 {
        return Err(Error::PreconditionViolation(format!(
            "step-size condition eta*L*T <= 1/2 fails: {}",
            p.step_size_product()
        )));
    }
    let (eta, t, g) = (p.lr, p.steps as f64, p.grad_bound);
    Ok(match optimizer {
        TheoryOptimizer::Sgd => 2.0 * eta * t * (2.0 * g + noise),
        TheoryOptimizer::Momentum => {
            2.0 * eta * p.bias_m / (1.0 - p.beta1) + 4.0 * eta * t * g + 2.0 * eta * t * noise
        }
        TheoryOptimizer::Adamw => {
            let root = p.eps.sqrt();
            eta * p.bias_m / ((1.0 - p.beta1) * root)
                + eta * g * p.bias_v / (2.0 * (1.0 - p.beta2) * p.eps.powf(1.5))
                + eta * t / root * (3.0 * g + noise)
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub trials: usize,
    pub exceedances: usize,
    pub fraction: f64,
    pub envelope: f64,
    /// `P(X ≥ exceedances)` for `X ~ Binomial(trials, δ)`.
    pub p_value: f64,
}

/// Monte Carlo of the noise envelope with Gaussian noise: each trial draws
/// `M K T` vectors of dimension `d` and records whether the largest norm
/// exceeds the envelope.
pub fn envelope_exceedance(p: &WhpParams, trials: usize, seed: u64) -> Result<EnvelopeReport> {
    let envelope = noise_envelope(p)?;
    if trials == 0 {
        return invalid("need at least one trial");
    }
    let vectors = p.clients * p.rounds * p.steps;
    let exceedances = (0..trials)
        .into_par_iter()
        .filter(|&trial| {
            let mut rng = SeededRng::new(derive_seed(seed, trial as u64));
            (0..vectors).any(|_| {
                let norm_sq: f64 = (0..p.dim).map(|_| (p.sigma * rng.gaussian()).powi(2)).sum();
                norm_sq.sqrt() > envelope
            })
        })
        .count();
    Ok(EnvelopeReport {
        trials,
        exceedances,
        fraction: exceedances as f64 / trials as f64,
        envelope,
        p_value: binomial_tail(trials, exceedances, p.delta),
    })
}

/// `P(X ≥ k)` for `X ~ Binomial(n, q)`.
pub fn binomial_tail(n: usize, k: usize, q: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return 1.0;
    }
    // Log pmf by recurrence from j = 0, then sum the upper tail in log space.
    let (lq, lp) = (q.ln(), (1.0 - q).ln());
    let mut log_pmf = n as f64 * lp;
    let mut logs = Vec::with_capacity(n - k + 1);
    for j in 0..=n {
        if j >= k {
            logs.push(log_pmf);
        }
        if j < n {
            log_pmf += ((n - j) as f64).ln() - ((j + 1) as f64).ln() + lq - lp;
        }
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()).exp().min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub runs: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    /// Largest deviation seen in any run.
    pub max_deviation: f64,
    /// Mean over runs of each run's largest deviation.
    pub mean_max_deviation: f64,
    pub bound: f64,
}

enum LocalState {
    Sgd,
    Momentum(MomentumState),
    Adamw(DenseAdamState),
}

impl LocalState {
    /// Reference state plus the given first- and second-moment offsets; the
    /// second moment is clamped at zero.
    fn init(optimizer: TheoryOptimizer, p: &WhpParams, dm: Matrix, dv: &Matrix) -> Self {
        match optimizer {
            TheoryOptimizer::Sgd => LocalState::Sgd,
            TheoryOptimizer::Momentum => LocalState::Momentum(MomentumState { v_buf: dm, step: 0 }),
            TheoryOptimizer::Adamw => LocalState::Adamw(DenseAdamState {
                m: dm,
                v: dv.map(|x| (p.reference_v0 + x).max(0.0)),
                step: 0,
            }),
        }
    }

    fn step(self, theta: &Matrix, g: &Matrix, p: &WhpParams) -> Result<(Matrix, LocalState)> {
        Ok(match self {
            LocalState::Sgd => (theta - &g.scale(p.lr), LocalState::Sgd),
            LocalState::Momentum(s) => {
                let (t, s) = ema_momentum_step(theta, &s, g, p.lr, p.beta1)?;
                (t, LocalState::Momentum(s))
            }
            LocalState::Adamw(s) => {
                let (t, s) = adamw_step(theta, &s, g, &p.adam_hyper())?;
                (t, LocalState::Adamw(s))
            }
        })
    }
}

/// Random direction with Frobenius norm `norm`. Always consumes the same
/// draws so runs differing only in `norm` share their noise.
fn perturbation(rng: &mut SeededRng, rows: usize, cols: usize, norm: f64) -> Matrix {
    let x = rng.gaussian_matrix(rows, cols, 1.0);
    let n = x.frobenius_norm();
    if n == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    x.scale(norm / n)
}

fn check_ensemble(ens: &QuadEnsemble, p: &WhpParams) -> Result<()> {
    p.validate()?;
    if ens.dim() != p.dim || ens.centers.len() != p.clients {
        return invalid("parameters do not match the ensemble's dimension and client count");
    }
    if p.smoothness < ens.smoothness {
        return invalid(format!(
            "smoothness {} is below the ensemble's {}",
            p.smoothness, ens.smoothness
        ));
    }
    Ok(())
}

/// Largest deviation of one federated run from the per-round references.
fn containment_run(ens: &QuadEnsemble, p: &WhpParams, optimizer: TheoryOptimizer, run_seed: u64) -> Result<f64> {
    let (rows, cols) = ens.shape();
    let g_bound = p.grad_bound;
    let mut theta_bar = Matrix::zeros(rows, cols);
    let mut worst: f64 = 0.0;
    for k in 0..p.rounds {
        let mut reference = Vec::with_capacity(p.steps + 1);
        let mut theta = theta_bar.clone();
        let zeros = Matrix::zeros(rows, cols);
        let mut state = LocalState::init(optimizer, p, zeros.clone(), &zeros);
        reference.push(theta.clone());
        for _ in 0..p.steps {
            let g = clip_by_norm(&ens.global_gradient(&theta), g_bound);
            let (next, s) = state.step(&theta, &g, p)?;
            theta = next;
            state = s;
            reference.push(theta.clone());
        }

        let mut next_bar = Matrix::zeros(rows, cols);
        for i in 0..p.clients {
            let mut rng = SeededRng::new(derive_seed(derive_seed(run_seed, k as u64), i as u64));
            let bias_m = perturbation(&mut rng, rows, cols, p.bias_m);
            let bias_v = perturbation(&mut rng, rows, cols, p.bias_v);
            let mut state = LocalState::init(optimizer, p, bias_m, &bias_v);
            let mut theta = theta_bar.clone();
            for reference_t in &reference[1..] {
                let sample = ens.sample_gradient(i, &theta, &mut rng);
                let g = clip_by_norm(&sample.grad, g_bound);
                let (next, s) = state.step(&theta, &g, p)?;
                theta = next;
                state = s;
                worst = worst.max((&theta - reference_t).frobenius_norm());
            }
            next_bar.axpy(ens.weights[i], &theta);
        }
        theta_bar = next_bar;
    }
    Ok(worst)
}

/// Runs `n_runs` independent federations (full participation, `p.rounds`
/// rounds of `p.steps` local steps from zero) and counts runs whose largest
/// client-to-reference deviation exceeds [`containment_radius`].
///
/// Client gradients are `clip(∇F_i + ξ, G)` and the reference follows the same
/// rule on `clip(∇f, G)`. The reference starts from a zero first moment and a
/// constant second moment `reference_v0`; clients add random perturbations of
/// norm `B_m` and `B_v`, the latter clamped so `v ≥ 0`.
pub fn check_containment(
    ens: &QuadEnsemble,
    p: &WhpParams,
    optimizer: TheoryOptimizer,
    n_runs: usize,
    seed: u64,
) -> Result<ContainmentReport> {
    check_ensemble(ens, p)?;
    if n_runs == 0 {
        return invalid("need at least one run");
    }
    let bound = containment_radius(p, optimizer)?;
    let deviations = (0..n_runs)
        .into_par_iter()
        .map(|r| containment_run(ens, p, optimizer, derive_seed(seed, r as u64)))
        .collect::<Result<Vec<f64>>>()?;
    let violations = deviations.iter().filter(|&&d| d > bound).count();
    Ok(ContainmentReport {
        runs: n_runs,
        violations,
        violation_fraction: violations as f64 / n_runs as f64,
        max_deviation: deviations.iter().cloned().fold(0.0, f64::max),
        mean_max_deviation: deviations.iter().sum::<f64>() / n_runs as f64,
        bound,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsReport {
    pub runs: usize,
    /// Monte Carlo estimate of `E‖θ̄₁ − θ*_T‖`.
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Largest `‖∇f‖` along the reference trajectory.
    pub reference_grad_max: f64,
}

/// One round of full-participation local SGD from zero, repeated `n_runs`
/// times, against `T` steps of gradient descent on `f`. The bound uses the
/// ensemble's `(H, B)`, `G = p.grad_bound` and `σ = noise_std · √d`.
pub fn check_rms_corollary(ens: &QuadEnsemble, p: &WhpParams, n_runs: usize, seed: u64) -> Result<RmsReport> {
    check_ensemble(ens, p)?;
    if n_runs == 0 {
        return invalid("need at least one run");
    }
    if p.step_size_product() > 1.0 / 6.0 {
        return Err(Error::PreconditionViolation(format!(
            "step-size condition eta*L*T <= 1/6 fails: {}",
            p.step_size_product()
        )));
    }
    let m = ens.centers.len();
    if ens.weights.iter().any(|&w| (w - 1.0 / m as f64).abs() > 1e-12) {
        return invalid("the in-expectation bound assumes uniform client weights");
    }
    if ens.clip.is_some() {
        return invalid("the in-expectation bound assumes unclipped, unbiased gradients");
    }
    let (rows, cols) = ens.shape();
    let mut reference = Matrix::zeros(rows, cols);
    let mut reference_grad_max: f64 = 0.0;
    for _ in 0..p.steps {
        let g = ens.global_gradient(&reference);
        reference_grad_max = reference_grad_max.max(g.frobenius_norm());
        reference.axpy(-p.lr, &g);
    }
    if reference_grad_max > p.grad_bound {
        return Err(Error::PreconditionViolation(format!(
            "reference gradient norm {reference_grad_max} exceeds G = {}",
            p.grad_bound
        )));
    }

    let gaps: Vec<f64> = (0..n_runs)
        .into_par_iter()
        .map(|r| {
            let run_seed = derive_seed(seed, r as u64);
            let mut bar = Matrix::zeros(rows, cols);
            for i in 0..m {
                let mut rng = SeededRng::new(derive_seed(run_seed, i as u64));
                let mut theta = Matrix::zeros(rows, cols);
                for _ in 0..p.steps {
                    let g = ens.sample_gradient(i, &theta, &mut rng).grad;
                    theta.axpy(-p.lr, &g);
                }
                bar.axpy(1.0 / m as f64, &theta);
            }
            (&bar - &reference).frobenius_norm()
        })
        .collect();
    let lhs = gaps.iter().sum::<f64>() / n_runs as f64;
    let (h, b) = (ens.dissimilarity_floor, ens.dissimilarity_growth);
    let g = p.grad_bound;
    let sigma = ens.noise_std * (ens.dim() as f64).sqrt();
    let rhs = 2.0 * p.lr * p.steps as f64 * ((h * h + (b * b - 1.0) * g * g).max(0.0).sqrt() + sigma);
    Ok(RmsReport {
        runs: n_runs,
        lhs,
        rhs,
        holds: lhs <= rhs,
        reference_grad_max,
    })
}
