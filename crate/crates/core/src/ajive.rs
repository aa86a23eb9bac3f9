//! Angle-based joint and individual variation explained (AJIVE).
//!
//! Each view `X_i` (rows are shared observations) is split into a joint part
//! living in a common score space, an individual part, and a residual:
//! `X_i = J_i + I_i + E_i`. The joint rank is either supplied or selected
//! against two resampled thresholds, a Wedin perturbation bound and a random
//! direction bound, following the mvlearn implementation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::check_weights;
use crate::error::{invalid, Result};
use crate::linalg::{
    derive_seed, orthonormalize_columns, randomized_svd, svd, symmetric_eigen, Matrix, SeededRng,
    SvdFactors, RANK_RTOL,
};
use crate::stats::percentile;

/// Views whose smaller dimension exceeds this use randomized SVD under
/// [`SvdStrategy::Auto`].
pub const AUTO_RSVD_MIN_DIM: usize = 200;
const RSVD_OVERSAMPLE: usize = 10;
const RSVD_POWER_ITERS: usize = 2;
const JOINT_CUTOFF_SLACK: f64 = 1e-10;

const TAG_WEDIN: u64 = 0x5745_4449_4e00;
const TAG_RANDOM: u64 = 0x5241_4e44_0000;
const TAG_VIEW_SVD: u64 = 0x5356_4400_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialRanks {
    Explicit(Vec<usize>),
    Uniform(usize),
    /// `min(cap, numeric rank, min_dim - 1)` per view.
    Auto { cap: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdStrategy {
    #[default]
    Auto,
    Exact,
    Randomized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AjiveConfig {
    pub initial_ranks: InitialRanks,
    pub joint_rank: Option<usize>,
    pub n_resamples: usize,
    pub bound_percentile: f64,
    pub center: bool,
    pub identifiability_check: bool,
    pub svd_strategy: SvdStrategy,
    pub seed: u64,
}

impl AjiveConfig {
    pub fn new(initial_ranks: InitialRanks) -> Self {
        AjiveConfig {
            initial_ranks,
            joint_rank: None,
            n_resamples: 100,
            bound_percentile: 95.0,
            center: true,
            identifiability_check: true,
            svd_strategy: SvdStrategy::Auto,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound_percentile > 0.0 && self.bound_percentile < 100.0) {
            return invalid("bound_percentile must lie in (0, 100)");
        }
        if self.joint_rank.is_none() && self.n_resamples == 0 {
            return invalid("n_resamples must be positive when the joint rank is estimated");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AjiveResult {
    pub joint: Vec<Matrix>,
    pub individual: Vec<Matrix>,
    pub noise: Vec<Matrix>,
    /// Orthonormal columns spanning the joint score space (`rows x joint_rank`).
    pub joint_basis: Matrix,
    pub joint_rank: usize,
    /// Column means removed from each view (zeros when centering is off).
    pub column_means: Vec<Vec<f64>>,
    pub initial_ranks: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub individual_ranks: Vec<usize>,
    pub joint_rank_estimate: JointRankEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRankEstimate {
    pub joint_rank: usize,
    /// Squared singular values of the stacked score bases, nonincreasing.
    pub joint_sv_sq: Vec<f64>,
    pub wedin_bound: Option<f64>,
    pub random_bound: Option<f64>,
}

/// A view together with its rank-`r_init` signal factors, as needed by the
/// Wedin bound.
#[derive(Clone, Copy, Debug)]
pub struct ViewSignal<'a> {
    pub data: &'a Matrix,
    pub factors: &'a SvdFactors,
}

fn view_svd(x: &Matrix, k: usize, strategy: SvdStrategy, seed: u64) -> Result<SvdFactors> {
    let min_dim = x.rows().min(x.cols());
    let randomized = match strategy {
        SvdStrategy::Exact => false,
        SvdStrategy::Randomized => true,
        SvdStrategy::Auto => min_dim > AUTO_RSVD_MIN_DIM,
    };
    if randomized && k < min_dim {
        let oversample = RSVD_OVERSAMPLE.min(min_dim - k);
        randomized_svd(x, k, oversample, RSVD_POWER_ITERS, seed)
    } else {
        svd(x, Some(k))
    }
}

fn maybe_center(x: &Matrix, center: bool) -> (Matrix, Vec<f64>) {
    if center {
        let means = x.column_means();
        (x.subtract_column_means(&means), means)
    } else {
        (x.clone(), vec![0.0; x.cols()])
    }
}

/// Phase 1 for a single view: rank-`r_init` signal factors of the (optionally
/// centered) view and the singular value threshold, the midpoint of the
/// `r_init`-th and `(r_init+1)`-th singular values.
pub fn initial_extraction(x: &Matrix, r_init: usize, config: &AjiveConfig) -> Result<(SvdFactors, f64)> {
    let min_dim = x.rows().min(x.cols());
    if r_init == 0 || r_init >= min_dim {
        return invalid(format!(
            "initial rank {r_init} must lie in 1..{min_dim} for a {:?} view",
            x.shape()
        ));
    }
    let (xc, _) = maybe_center(x, config.center);
    let f = view_svd(&xc, r_init + 1, config.svd_strategy, derive_seed(config.seed, TAG_VIEW_SVD))?;
    let threshold = 0.5 * (f.s[r_init - 1] + f.s[r_init]);
    Ok((f.truncated(r_init), threshold))
}

struct Extraction {
    centered: Matrix,
    means: Vec<f64>,
    /// `None` for a degenerate (all-zero) view.
    signal: Option<(SvdFactors, f64)>,
}

fn extract_view(x: &Matrix, index: usize, config: &AjiveConfig) -> Result<Extraction> {
    let (centered, means) = maybe_center(x, config.center);
    let min_dim = x.rows().min(x.cols());
    if centered.is_zero() {
        return Ok(Extraction {
            centered,
            means,
            signal: None,
        });
    }
    let requested = match &config.initial_ranks {
        InitialRanks::Explicit(ranks) => Some(ranks[index]),
        InitialRanks::Uniform(r) => Some(*r),
        InitialRanks::Auto { .. } => None,
    };
    let seed = derive_seed(config.seed, TAG_VIEW_SVD ^ index as u64);
    let (factors, r) = match (requested, &config.initial_ranks) {
        (Some(r), _) => {
            if r == 0 || r >= min_dim {
                return invalid(format!(
                    "initial rank {r} of view {index} must lie in 1..{min_dim}"
                ));
            }
            (view_svd(&centered, r + 1, config.svd_strategy, seed)?, r)
        }
        (None, InitialRanks::Auto { cap }) => {
            if min_dim < 2 {
                return invalid(format!("view {index} is too small for rank selection"));
            }
            let k_max = (*cap).min(min_dim - 1).max(1);
            let f = view_svd(&centered, k_max + 1, config.svd_strategy, seed)?;
            let top = f.s[0];
            let numeric = f.s[..k_max].iter().filter(|&&s| s > RANK_RTOL * top).count();
            (f, numeric.min(k_max))
        }
        _ => unreachable!("explicit ranks resolve above"),
    };
    if r == 0 {
        return Ok(Extraction {
            centered,
            means,
            signal: None,
        });
    }
    let threshold = 0.5 * (factors.s[r - 1] + factors.s[r]);
    Ok(Extraction {
        centered,
        means,
        signal: Some((factors.truncated(r), threshold)),
    })
}

/// Dominant eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration from a fixed start vector.
fn top_eigenvalue(s: &Matrix) -> f64 {
    let n = s.rows();
    let mut x = Matrix::filled(n, 1, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let y = s.dot(&x);
        let next = x.frobenius_dot(&y);
        let norm = y.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        x = y.scale(1.0 / norm);
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Squared singular values (nonincreasing) of the stacked score bases and the
/// left singular vectors for the nonzero ones, via the smaller Gram matrix.
fn stacked_scores(bases: &[Matrix]) -> Result<(Vec<f64>, Matrix)> {
    let m = Matrix::hcat(bases)?;
    let (n, total) = m.shape();
    if total == 0 {
        return Ok((Vec::new(), Matrix::zeros(n, 0)));
    }
    let use_cols = total <= n;
    let gram = if use_cols { m.tr_dot(&m) } else { m.dot_tr(&m) };
    let (values, vectors) = symmetric_eigen(&gram)?;
    let sv_sq: Vec<f64> = values.iter().map(|l| l.max(0.0)).collect();
    let top = sv_sq[0];
    let kept = sv_sq.iter().take_while(|&&l| l > 0.0 && l > 1e-12 * top).count();
    let basis = if use_cols {
        let mut u = m.dot(&vectors.columns(0, kept));
        for (col, l) in sv_sq.iter().take(kept).enumerate() {
            let sigma = l.sqrt();
            for row in 0..n {
                u.set(row, col, u.get(row, col) / sigma);
            }
        }
        u
    } else {
        vectors.columns(0, kept)
    };
    Ok((sv_sq, basis))
}

/// Resampled random-direction bound: `percentile`-th percentile of the top
/// squared singular value of stacked independent random orthonormal bases.
pub fn random_direction_bound(
    n: usize,
    ranks: &[usize],
    n_resamples: usize,
    bound_percentile: f64,
    seed: u64,
) -> Result<f64> {
    if ranks.iter().any(|&r| r == 0 || r > n) {
        return invalid("random bound needs ranks in 1..=rows");
    }
    let total: usize = ranks.iter().sum();
    let samples: Vec<f64> = (0..n_resamples)
        .into_par_iter()
        .map(|s| {
            let mut rng = SeededRng::new(derive_seed(seed, s as u64));
            let blocks: Vec<Matrix> = ranks
                .iter()
                .map(|&r| orthonormalize_columns(&rng.gaussian_matrix(n, r, 1.0)))
                .collect::<Result<_>>()?;
            let m = Matrix::hcat(&blocks)?;
            let gram = if total <= n { m.tr_dot(&m) } else { m.dot_tr(&m) };
            Ok(top_eigenvalue(&gram))
        })
        .collect::<Result<_>>()?;
    Ok(percentile(&samples, bound_percentile).unwrap_or(0.0))
}

/// Resampled Wedin bound: the `(100 - percentile)`-th percentile of
/// `K - Σ_i min(max(‖X_iᵀ w‖, ‖X_i z‖) / σ_r, 1)²` with unit `w`, `z` drawn in
/// the complements of each view's signal score and loading spaces.
pub fn wedin_bound(
    signals: &[ViewSignal<'_>],
    n_resamples: usize,
    bound_percentile: f64,
    seed: u64,
) -> Result<f64> {
    let per_view: Vec<Vec<f64>> = signals
        .par_iter()
        .enumerate()
        .map(|(i, v)| wedin_view_samples(v, n_resamples, derive_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let k = signals.len() as f64;
    let samples: Vec<f64> = (0..n_resamples)
        .map(|s| k - per_view.iter().map(|w| w[s] * w[s]).sum::<f64>())
        .collect();
    Ok(percentile(&samples, 100.0 - bound_percentile).unwrap_or(0.0))
}

fn unit_complement_samples(basis: &Matrix, count: usize, rng: &mut SeededRng) -> Matrix {
    let mut z = rng.gaussian_matrix(basis.rows(), count, 1.0);
    z -= &basis.dot(&basis.tr_dot(&z));
    for j in 0..count {
        let norm = (0..z.rows()).map(|i| z.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..z.rows() {
                z.set(i, j, z.get(i, j) / norm);
            }
        }
    }
    z
}

fn column_norms(m: &Matrix) -> Vec<f64> {
    (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect()
}

fn wedin_view_samples(v: &ViewSignal<'_>, count: usize, seed: u64) -> Result<Vec<f64>> {
    let f = v.factors;
    if f.rank == 0 {
        return invalid("Wedin bound needs a nonempty signal");
    }
    let sigma_min = f.s[f.rank - 1];
    let mut rng = SeededRng::new(derive_seed(seed, TAG_WEDIN));
    let w = unit_complement_samples(&f.u, count, &mut rng);
    let z = unit_complement_samples(&f.v, count, &mut rng);
    let u_norms = column_norms(&v.data.tr_dot(&w));
    let v_norms = column_norms(&v.data.dot(&z));
    Ok(u_norms
        .iter()
        .zip(&v_norms)
        .map(|(&a, &b)| {
            if sigma_min > 0.0 {
                (a.max(b) / sigma_min).min(1.0)
            } else {
                1.0
            }
        })
        .collect())
}

/// Joint rank from score bases alone (random direction bound only). A joint
/// rank supplied in `config` is returned unchanged.
pub fn estimate_joint_rank(score_bases: &[Matrix], config: &AjiveConfig) -> Result<JointRankEstimate> {
    joint_rank_impl(score_bases, None, config)
}

/// Joint rank using both the Wedin and random direction bounds.
pub fn estimate_joint_rank_with_signals(
    signals: &[ViewSignal<'_>],
    config: &AjiveConfig,
) -> Result<JointRankEstimate> {
    let bases: Vec<Matrix> = signals.iter().map(|s| s.factors.u.clone()).collect();
    joint_rank_impl(&bases, Some(signals), config)
}

fn joint_rank_impl(
    bases: &[Matrix],
    signals: Option<&[ViewSignal<'_>]>,
    config: &AjiveConfig,
) -> Result<JointRankEstimate> {
    config.validate()?;
    if bases.is_empty() {
        return invalid("no score bases supplied");
    }
    let n = bases[0].rows();
    if bases.iter().any(|b| b.rows() != n) {
        return invalid("score bases disagree on row count");
    }
    let (joint_sv_sq, _) = stacked_scores(bases)?;
    if let Some(rank) = config.joint_rank {
        return Ok(JointRankEstimate {
            joint_rank: rank,
            joint_sv_sq,
            wedin_bound: None,
            random_bound: None,
        });
    }
    let ranks: Vec<usize> = bases.iter().map(Matrix::cols).collect();
    let random = random_direction_bound(
        n,
        &ranks,
        config.n_resamples,
        config.bound_percentile,
        derive_seed(config.seed, TAG_RANDOM),
    )?;
    let wedin = match signals {
        Some(s) => Some(wedin_bound(
            s,
            config.n_resamples,
            config.bound_percentile,
            derive_seed(config.seed, TAG_WEDIN),
        )?),
        None => None,
    };
    // A noiseless view saturates the Wedin bound at K, which a perfectly
    // shared direction only attains up to rounding.
    let cutoff = wedin.map_or(random, |w| w.max(random)) - JOINT_CUTOFF_SLACK * bases.len() as f64;
    let joint_rank = joint_sv_sq.iter().filter(|&&s| s > cutoff).count();
    Ok(JointRankEstimate {
        joint_rank,
        joint_sv_sq,
        wedin_bound: wedin,
        random_bound: Some(random),
    })
}

fn degenerate_result(extractions: Vec<Extraction>, n: usize) -> AjiveResult {
    let mut joint = Vec::new();
    let mut individual = Vec::new();
    let mut noise = Vec::new();
    let mut column_means = Vec::new();
    for e in extractions {
        let (r, c) = e.centered.shape();
        joint.push(Matrix::zeros(r, c));
        individual.push(Matrix::zeros(r, c));
        noise.push(e.centered);
        column_means.push(e.means);
    }
    let k = joint.len();
    AjiveResult {
        joint,
        individual,
        noise,
        joint_basis: Matrix::zeros(n, 0),
        joint_rank: 0,
        column_means,
        initial_ranks: vec![0; k],
        thresholds: vec![0.0; k],
        individual_ranks: vec![0; k],
        joint_rank_estimate: JointRankEstimate {
            joint_rank: 0,
            joint_sv_sq: Vec::new(),
            wedin_bound: None,
            random_bound: None,
        },
    }
}

/// Full three-phase decomposition. Any all-zero (after centering) view makes
/// the problem degenerate: joint rank 0 and every view is left as residual.
pub fn ajive(views: &[Matrix], config: &AjiveConfig) -> Result<AjiveResult> {
    config.validate()?;
    if views.is_empty() {
        return invalid("AJIVE needs at least one view");
    }
    let n = views[0].rows();
    if n == 0 || views.iter().any(|v| v.rows() != n || v.cols() == 0) {
        return invalid("views must be nonempty and share their row count");
    }
    if views.iter().any(|v| !v.is_finite()) {
        return invalid("views must be finite");
    }
    if let InitialRanks::Explicit(ranks) = &config.initial_ranks {
        if ranks.len() != views.len() {
            return invalid(format!("{} initial ranks for {} views", ranks.len(), views.len()));
        }
    }

    let extractions: Vec<Extraction> = views
        .par_iter()
        .enumerate()
        .map(|(i, x)| extract_view(x, i, config))
        .collect::<Result<_>>()?;
    if extractions.iter().any(|e| e.signal.is_none()) {
        return Ok(degenerate_result(extractions, n));
    }

    let signals: Vec<ViewSignal<'_>> = extractions
        .iter()
        .map(|e| ViewSignal {
            data: &e.centered,
            factors: &e.signal.as_ref().expect("checked above").0,
        })
        .collect();
    let thresholds: Vec<f64> = extractions
        .iter()
        .map(|e| e.signal.as_ref().expect("checked above").1)
        .collect();
    let initial_ranks: Vec<usize> = signals.iter().map(|s| s.factors.rank).collect();

    let estimate = estimate_joint_rank_with_signals(&signals, config)?;
    let bases: Vec<Matrix> = signals.iter().map(|s| s.factors.u.clone()).collect();
    let (_, all_scores) = stacked_scores(&bases)?;
    let candidate_rank = estimate.joint_rank.min(all_scores.cols());

    let candidates = all_scores.columns(0, candidate_rank);
    let mut identifiable = vec![true; candidate_rank];
    if config.identifiability_check {
        // Row j of uᵀ X_i is the loading of candidate j in view i.
        let loadings: Vec<Vec<f64>> = signals
            .par_iter()
            .map(|s| {
                let l = candidates.tr_dot(s.data);
                (0..candidate_rank)
                    .map(|j| (0..l.cols()).map(|c| l.get(j, c).powi(2)).sum::<f64>().sqrt())
                    .collect()
            })
            .collect();
        for (norms, &tau) in loadings.iter().zip(&thresholds) {
            for (ok, &norm) in identifiable.iter_mut().zip(norms) {
                *ok &= norm >= tau;
            }
        }
    }
    let keep: Vec<usize> = (0..candidate_rank).filter(|&j| identifiable[j]).collect();
    let joint_basis = Matrix::from_fn(n, keep.len(), |i, c| all_scores.get(i, keep[c]));
    let joint_rank = keep.len();

    let parts: Vec<(Matrix, Matrix, Matrix, usize)> = extractions
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let xc = &e.centered;
            let joint = joint_basis.dot(&joint_basis.tr_dot(xc));
            let residual = xc - &joint;
            let r_init = initial_ranks[i];
            let tau = thresholds[i];
            let (individual, ind_rank) = if residual.is_zero() {
                (Matrix::zeros(xc.rows(), xc.cols()), 0)
            } else {
                let seed = derive_seed(config.seed, TAG_VIEW_SVD ^ (1 << 32) ^ i as u64);
                let f = view_svd(&residual, r_init, config.svd_strategy, seed)?;
                let k = f.s.iter().filter(|&&s| s > tau).count();
                (f.truncated(k).reconstruct(), k)
            };
            let noise = &(xc - &joint) - &individual;
            Ok((joint, individual, noise, ind_rank))
        })
        .collect::<Result<_>>()?;

    let mut joint = Vec::with_capacity(views.len());
    let mut individual = Vec::with_capacity(views.len());
    let mut noise = Vec::with_capacity(views.len());
    let mut individual_ranks = Vec::with_capacity(views.len());
    for (j, i, e, r) in parts {
        joint.push(j);
        individual.push(i);
        noise.push(e);
        individual_ranks.push(r);
    }
    Ok(AjiveResult {
        joint,
        individual,
        noise,
        joint_basis,
        joint_rank,
        column_means: extractions.into_iter().map(|e| e.means).collect(),
        initial_ranks,
        thresholds,
        individual_ranks,
        joint_rank_estimate: estimate,
    })
}

/// Server-side synchronization of nonnegative second-moment views: AJIVE
/// without centering at joint rank `r_joint` (initial ranks capped at
/// `2 * r_joint`), then the weighted average of the joint parts clamped at 0.
pub fn sync_second_moments(views: &[Matrix], r_joint: usize, weights: &[f64]) -> Result<Matrix> {
    let mut config = AjiveConfig::new(InitialRanks::Auto {
        cap: 2 * r_joint.max(1),
    });
    config.joint_rank = Some(r_joint);
    config.center = false;
    sync_second_moments_with(views, weights, &config)
}

pub fn sync_second_moments_with(views: &[Matrix], weights: &[f64], config: &AjiveConfig) -> Result<Matrix> {
    if views.iter().any(|v| v.min_entry() < 0.0) {
        return invalid("second-moment views must be elementwise nonnegative");
    }
    Ok(joint_average_with(views, weights, config)?.clamp_min(0.0))
}

/// Weighted average of the per-view joint parts with joint rank `r_joint`,
/// without clamping. Seeded-basis views of projected buffers are signed, so
/// nonnegativity is restored only after projecting back.
pub fn joint_average(views: &[Matrix], r_joint: usize, weights: &[f64]) -> Result<Matrix> {
    let mut config = AjiveConfig::new(InitialRanks::Auto {
        cap: 2 * r_joint.max(1),
    });
    config.joint_rank = Some(r_joint);
    config.center = false;
    joint_average_with(views, weights, &config)
}

pub fn joint_average_with(views: &[Matrix], weights: &[f64], config: &AjiveConfig) -> Result<Matrix> {
    check_weights(weights, views.len())?;
    let result = ajive(views, config)?;
    let mut acc = Matrix::zeros(views[0].rows(), views[0].cols());
    for (j, &w) in result.joint.iter().zip(weights) {
        if !j.same_shape(&acc) {
            return invalid("views disagree in shape");
        }
        acc.axpy(w, j);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_principal_angle;

    fn explicit(ranks: &[usize]) -> AjiveConfig {
        AjiveConfig::new(InitialRanks::Explicit(ranks.to_vec()))
    }

    #[test]
    fn extraction_threshold_is_midpoint() {
        let mut rng = SeededRng::new(1);
        let x = rng.gaussian_matrix(10, 2, 1.0).dot(&rng.gaussian_matrix(2, 6, 1.0));
        let mut cfg = explicit(&[2]);
        cfg.center = false;
        let (f, tau) = initial_extraction(&x, 2, &cfg).unwrap();
        assert!((tau - f.s[1] / 2.0).abs() < 1e-10 * f.s[0]);

        let noisy = rng.gaussian_matrix(9, 7, 1.0);
        cfg.center = true;
        let (f, _) = initial_extraction(&noisy, 3, &cfg).unwrap();
        let means = noisy.column_means();
        let direct = svd(&noisy.subtract_column_means(&means), None).unwrap();
        for j in 0..3 {
            assert!((f.s[j] - direct.s[j]).abs() < 1e-12);
        }
        assert!(initial_extraction(&noisy, 7, &cfg).is_err());
    }

    #[test]
    fn column_constant_view_centers_to_zero() {
        let x = Matrix::from_fn(6, 4, |_, j| j as f64 + 1.0);
        let cfg = AjiveConfig::new(InitialRanks::Uniform(1));
        let res = ajive(&[x.clone(), x], &cfg).unwrap();
        assert_eq!(res.joint_rank, 0);
        assert!(res.noise.iter().all(Matrix::is_zero));
    }

    #[test]
    fn perfectly_aligned_bases() {
        let u = Matrix::column_vector(&[0.6, 0.8, 0.0, 0.0, 0.0]);
        let bases = vec![u.clone(); 4];
        let est = estimate_joint_rank(&bases, &AjiveConfig::new(InitialRanks::Uniform(1))).unwrap();
        assert!((est.joint_sv_sq[0] - 4.0).abs() < 1e-12);
        assert!(est.joint_rank >= 1);
    }

    #[test]
    fn orthogonal_bases_have_no_joint_rank() {
        let e = Matrix::identity(40);
        let bases: Vec<Matrix> = (0..4).map(|i| e.columns(2 * i, 2 * i + 2)).collect();
        let est = estimate_joint_rank(&bases, &AjiveConfig::new(InitialRanks::Uniform(2))).unwrap();
        assert!(est.joint_sv_sq.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        assert!(est.random_bound.unwrap() > 1.0);
        assert_eq!(est.joint_rank, 0);
    }

    #[test]
    fn supplied_joint_rank_is_returned() {
        let bases = vec![Matrix::identity(6).columns(0, 2); 2];
        let mut cfg = AjiveConfig::new(InitialRanks::Uniform(2));
        cfg.joint_rank = Some(7);
        assert_eq!(estimate_joint_rank(&bases, &cfg).unwrap().joint_rank, 7);
        assert!(estimate_joint_rank(&[], &cfg).is_err());
    }

    #[test]
    fn pure_joint_views() {
        let mut rng = SeededRng::new(2);
        let x = rng.gaussian_matrix(30, 2, 1.0).dot(&rng.gaussian_matrix(2, 12, 1.0));
        let views = vec![x.clone(); 3];
        let res = ajive(&views, &explicit(&[2, 2, 2])).unwrap();
        assert_eq!(res.joint_rank, 2);
        let xc = x.subtract_column_means(&x.column_means());
        for i in 0..3 {
            assert!((&res.joint[i] - &xc).frobenius_norm() < 1e-8 * xc.frobenius_norm());
            let rest = res.individual[i].frobenius_norm() + res.noise[i].frobenius_norm();
            assert!(rest < 1e-6 * xc.frobenius_norm());
        }
    }

    #[test]
    fn shared_plus_orthogonal_individual_parts() {
        // Observation space R^40: shared score e0, individual scores e1..e3;
        // loadings orthogonal within each view.
        let n = 40;
        let d = 8;
        let e = Matrix::identity(n);
        let f = Matrix::identity(d);
        let mut views = Vec::new();
        let mut shared_parts = Vec::new();
        for i in 0..3 {
            let shared = e.columns(0, 1).dot(&f.columns(0, 1).transpose()).scale(10.0);
            let own = e.columns(i + 1, i + 2).dot(&f.columns(i + 1, i + 2).transpose()).scale(4.0);
            views.push(&shared + &own);
            shared_parts.push(shared);
        }
        let mut cfg = explicit(&[2, 2, 2]);
        cfg.center = false;
        let res = ajive(&views, &cfg).unwrap();
        assert_eq!(res.joint_rank, 1);
        for i in 0..3 {
            let err = (&res.joint[i] - &shared_parts[i]).frobenius_norm();
            assert!(err < 1e-6 * shared_parts[i].frobenius_norm(), "view {i} err {err}");
            assert_eq!(res.individual_ranks[i], 1);
        }
    }

    #[test]
    fn decomposition_invariants_on_noisy_views() {
        let mut rng = SeededRng::new(3);
        let joint_scores = rng.gaussian_matrix(50, 2, 1.0);
        let views: Vec<Matrix> = (0..4)
            .map(|_| {
                let signal = joint_scores.dot(&rng.gaussian_matrix(2, 15, 3.0));
                let own = rng.gaussian_matrix(50, 1, 1.0).dot(&rng.gaussian_matrix(1, 15, 2.0));
                &(&signal + &own) + &rng.gaussian_matrix(50, 15, 0.05)
            })
            .collect();
        let mut cfg = explicit(&[3, 3, 3, 3]);
        cfg.seed = 17;
        let res = ajive(&views, &cfg).unwrap();
        assert_eq!(res.joint_rank, 2);
        let b = &res.joint_basis;
        assert!((&b.tr_dot(b) - &Matrix::identity(res.joint_rank)).frobenius_norm() < 1e-10);
        for (i, x) in views.iter().enumerate() {
            let xc = x.subtract_column_means(&res.column_means[i]);
            let sum = &(&res.joint[i] + &res.individual[i]) + &res.noise[i];
            assert!((&sum - &xc).max_abs() < 1e-12 * (1.0 + xc.max_abs()));
            let outside = &res.joint[i] - &b.dot(&b.tr_dot(&res.joint[i]));
            assert!(outside.frobenius_norm() < 1e-8);
        }
        let centered_scores = joint_scores.subtract_column_means(&joint_scores.column_means());
        let truth = orthonormalize_columns(&centered_scores).unwrap();
        assert!(max_principal_angle(&truth, b).unwrap() < 0.1);
        assert_eq!(ajive(&views, &cfg).unwrap(), res);
    }

    #[test]
    fn wedin_bound_uses_resampling_percentile() {
        let mut rng = SeededRng::new(4);
        let x = rng.gaussian_matrix(20, 10, 1.0);
        let f = svd(&x, Some(3)).unwrap();
        let sig = [ViewSignal { data: &x, factors: &f }];
        let w = wedin_bound(&sig, 50, 95.0, 1).unwrap();
        // One view: samples lie in [0, 1].
        assert!((0.0..=1.0).contains(&w));
        assert_eq!(w, wedin_bound(&sig, 50, 95.0, 1).unwrap());
    }

    #[test]
    fn zero_view_is_degenerate() {
        let mut rng = SeededRng::new(5);
        let views = vec![rng.gaussian_matrix(8, 5, 1.0), Matrix::zeros(8, 5)];
        let res = ajive(&views, &explicit(&[2, 2])).unwrap();
        assert_eq!(res.joint_rank, 0);
        assert!(res.joint.iter().all(Matrix::is_zero));
    }

    #[test]
    fn identical_nonnegative_views_sync_exactly() {
        let mut rng = SeededRng::new(6);
        let base = rng.gaussian_matrix(12, 3, 1.0).map(f64::abs);
        let v = base.dot_tr(&base);
        let out = sync_second_moments(&vec![v.clone(); 4], 3, &[0.25; 4]).unwrap();
        assert!((&out - &v).frobenius_norm() < 1e-8 * v.frobenius_norm());
    }

    #[test]
    fn sync_output_is_nonnegative() {
        let mut rng = SeededRng::new(7);
        let views: Vec<Matrix> = (0..5).map(|_| rng.gaussian_matrix(10, 10, 1.0).map(|x| x * x)).collect();
        let out = sync_second_moments(&views, 2, &[0.2; 5]).unwrap();
        assert!(out.min_entry() >= 0.0);
        let bad = vec![Matrix::filled(3, 3, -1.0)];
        assert!(sync_second_moments(&bad, 1, &[1.0]).is_err());
    }

    #[test]
    fn randomized_strategy_agrees_on_low_rank_views() {
        let mut rng = SeededRng::new(8);
        let scores = rng.gaussian_matrix(60, 3, 1.0);
        let views: Vec<Matrix> = (0..3).map(|_| scores.dot(&rng.gaussian_matrix(3, 40, 1.0))).collect();
        let mut exact = explicit(&[3, 3, 3]);
        exact.joint_rank = Some(3);
        exact.svd_strategy = SvdStrategy::Exact;
        let mut randomized = exact.clone();
        randomized.svd_strategy = SvdStrategy::Randomized;
        let a = ajive(&views, &exact).unwrap();
        let b = ajive(&views, &randomized).unwrap();
        for i in 0..3 {
            assert!((&a.joint[i] - &b.joint[i]).frobenius_norm() < 1e-8 * a.joint[i].frobenius_norm());
        }
    }
}
