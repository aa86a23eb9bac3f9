use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::SeededRng;

/// Non-IID split of a labelled sample set across clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletPartition {
    pub alpha: f64,
    /// Sample indices held by each client, ascending.
    pub assignments: Vec<Vec<usize>>,
    /// Per-client class proportions drawn from `Dir(alpha * 1)`.
    pub proportions: Vec<Vec<f64>>,
}

impl DirichletPartition {
    /// Number of classes holding more than `threshold` of a client's proportion
    /// mass, averaged over clients.
    pub fn mean_active_classes(&self, threshold: f64) -> f64 {
        let counts: Vec<f64> = self
            .proportions
            .iter()
            .map(|p| p.iter().filter(|&&x| x > threshold).count() as f64)
            .collect();
        crate::stats::mean(&counts)
    }
}

/// Draws one point of the symmetric Dirichlet simplex. Works in log space via
/// `Gamma(a) = Gamma(a + 1) * U^(1/a)` so tiny concentrations do not underflow.
fn sample_dirichlet(alpha: f64, k: usize, rng: &mut SeededRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("shape is positive");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng.raw());
            let u = 1.0 - rng.uniform();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Splits `total` items into integer shares proportional to `weights` with the
/// largest-remainder rule; ties go to the lower index.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        let mut shares = vec![0; weights.len()];
        if let Some(first) = shares.first_mut() {
            *first = total;
        }
        return shares;
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut shares: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        shares[i] += 1;
    }
    shares
}

/// Samples per-client class proportions and deals each class's samples out to
/// clients in proportion to their weight on that class.
pub fn dirichlet_partition(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<DirichletPartition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid(format!("dirichlet alpha must be positive, got {alpha}"));
    }
    if clients == 0 {
        return invalid("dirichlet_partition needs at least one client");
    }
    if labels.len() < clients {
        return invalid(format!(
            "{} samples cannot cover {clients} clients",
            labels.len()
        ));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = SeededRng::new(seed);
    let proportions: Vec<Vec<f64>> = (0..clients)
        .map(|_| sample_dirichlet(alpha, classes, &mut rng))
        .collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (idx, &label) in labels.iter().enumerate() {
        by_class[label].push(idx);
    }
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (class, members) in by_class.iter_mut().enumerate() {
        rng.shuffle(members);
        let weights: Vec<f64> = proportions.iter().map(|p| p[class]).collect();
        let shares = largest_remainder(members.len(), &weights);
        let mut cursor = 0;
        for (client, &share) in shares.iter().enumerate() {
            assignments[client].extend_from_slice(&members[cursor..cursor + share]);
            cursor += share;
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(DirichletPartition {
        alpha,
        assignments,
        proportions,
    })
}
