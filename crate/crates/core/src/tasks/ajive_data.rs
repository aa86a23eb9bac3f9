use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AjiveValidationConfig {
    pub rows: usize,
    pub cols: usize,
    pub clients: usize,
    /// Rank of the shared gradient signal.
    pub shared_rank: usize,
    /// Rank of each client's private drift.
    pub drift_rank: usize,
    pub drift_scale: f64,
    pub noise_std: f64,
}

impl Default for AjiveValidationConfig {
    fn default() -> Self {
        AjiveValidationConfig {
            rows: 60,
            cols: 40,
            clients: 10,
            shared_rank: 5,
            drift_rank: 2,
            drift_scale: 1.0,
            noise_std: 0.3,
        }
    }
}

/// Client second-moment views and the shared ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AjiveValidationData {
    /// `G_k ⊙ G_k` per client.
    pub views: Vec<Matrix>,
    /// `G* ⊙ G*`.
    pub v_star: Matrix,
    pub shared_gradient: Matrix,
}

fn low_rank(rng: &mut SeededRng, rows: usize, cols: usize, rank: usize) -> Matrix {
    let left = rng.gaussian_matrix(rows, rank, 1.0);
    let right = rng.gaussian_matrix(rank, cols, 1.0);
    left.dot(&right).scale(1.0 / (rank as f64).sqrt())
}

/// Each client sees `G* + L_k + noise`, with `G*` of rank `shared_rank` and
/// `L_k` a private rank-`drift_rank` drift, and reports its elementwise square.
pub fn gen_ajive_validation(cfg: &AjiveValidationConfig, seed: u64) -> Result<AjiveValidationData> {
    if cfg.rows < 5 || cfg.cols < 5 {
        return invalid(format!(
            "validation views need at least 5x5, got {}x{}",
            cfg.rows, cfg.cols
        ));
    }
    if cfg.clients == 0 || cfg.shared_rank == 0 {
        return invalid("validation needs clients and a positive shared rank");
    }
    if cfg.noise_std < 0.0 || cfg.drift_scale < 0.0 {
        return invalid("noise and drift scales must be nonnegative");
    }
    let mut rng = SeededRng::new(seed);
    let shared = low_rank(&mut rng, cfg.rows, cfg.cols, cfg.shared_rank);
    let views = (0..cfg.clients)
        .map(|_| {
            let mut g = shared.clone();
            if cfg.drift_rank > 0 {
                let drift = low_rank(&mut rng, cfg.rows, cfg.cols, cfg.drift_rank);
                g.axpy(cfg.drift_scale, &drift);
            }
            let noise = rng.gaussian_matrix(cfg.rows, cfg.cols, 1.0);
            g.axpy(cfg.noise_std, &noise);
            g.hadamard(&g)
        })
        .collect();
    Ok(AjiveValidationData {
        views,
        v_star: shared.hadamard(&shared),
        shared_gradient: shared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numeric_rank, tail_distance, RANK_RTOL};

    #[test]
    fn noiseless_views_equal_truth() {
        let cfg = AjiveValidationConfig {
            clients: 4,
            drift_scale: 0.0,
            noise_std: 0.0,
            ..AjiveValidationConfig::default()
        };
        let data = gen_ajive_validation(&cfg, 1).unwrap();
        for v in &data.views {
            assert_eq!(v, &data.v_star);
        }
    }

    #[test]
    fn squared_rank_five_signal_has_rank_at_most_fifteen() {
        let data = gen_ajive_validation(&AjiveValidationConfig::default(), 2).unwrap();
        let v = &data.v_star;
        assert!(numeric_rank(v, RANK_RTOL).unwrap() <= 15);
        assert!(tail_distance(v, 15).unwrap() < 1e-8 * v.frobenius_norm());
    }

    #[test]
    fn reproducible_and_shaped() {
        let cfg = AjiveValidationConfig::default();
        let a = gen_ajive_validation(&cfg, 3).unwrap();
        let b = gen_ajive_validation(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.views.len(), 10);
        assert!(a.views.iter().all(|v| v.shape() == (60, 40) && v.min_entry() >= 0.0));
        assert!(gen_ajive_validation(&AjiveValidationConfig { rows: 4, ..cfg }, 0).is_err());
    }
}
