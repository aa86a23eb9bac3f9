//! LoRA parameterization, the three adapter aggregation rules, and the
//! update-space mismatch report.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{numeric_rank, tail_distance, Matrix, SeededRng, RANK_RTOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraParams {
    /// Frozen base weight, `d_out x d_in`.
    pub w0: Matrix,
    /// Down projection, `r x d_in`.
    pub a: Matrix,
    /// Up projection, `d_out x r`.
    pub b: Matrix,
    pub scaling: f64,
}

impl LoraParams {
    /// Standard initialization: `a` Gaussian with std `1/sqrt(r)`, `b = 0`.
    pub fn init(w0: Matrix, rank: usize, seed: u64) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        if rank == 0 || rank > d_out.min(d_in) {
            return invalid(format!("LoRA rank {rank} invalid for {d_out}x{d_in}"));
        }
        let a = SeededRng::new(seed).gaussian_matrix(rank, d_in, 1.0 / (rank as f64).sqrt());
        Ok(LoraParams {
            w0,
            a,
            b: Matrix::zeros(d_out, rank),
            scaling: 1.0,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_out, d_in) = self.w0.shape();
        let r = self.a.rows();
        if self.a.cols() != d_in || self.b.shape() != (d_out, r) {
            return invalid(format!(
                "LoRA shapes inconsistent: w0 {:?}, a {:?}, b {:?}",
                self.w0.shape(),
                self.a.shape(),
                self.b.shape()
            ));
        }
        if r > d_out.min(d_in) {
            return invalid("LoRA rank exceeds block dimensions");
        }
        Ok(())
    }

    /// `scaling · b · a`.
    pub fn delta(&self) -> Matrix {
        self.b.dot(&self.a).scale(self.scaling)
    }

    /// Gradients of `(a, b)` given the gradient `g` with respect to the
    /// effective weight. Returns `(grad_a, grad_b)`.
    pub fn factor_grads(&self, g: &Matrix) -> (Matrix, Matrix) {
        let grad_a = self.b.tr_dot(g).scale(self.scaling);
        let grad_b = g.dot_tr(&self.a).scale(self.scaling);
        (grad_a, grad_b)
    }
}

pub fn effective_weight(p: &LoraParams) -> Result<Matrix> {
    p.validate()?;
    Ok(&p.w0 + &p.delta())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Average each factor, then multiply.
    FactorProduct,
    /// Average the trainable factor against a shared frozen one.
    FrozenA,
    /// Average the per-client products.
    Lifted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedDelta {
    pub delta: Matrix,
    pub mode: AggregationMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub tail: f64,
    pub numeric_rank: usize,
}

/// Nonnegative weights summing to one within 1e-12.
pub fn check_weights(weights: &[f64], count: usize) -> Result<()> {
    if weights.len() != count {
        return invalid(format!("{} weights for {count} clients", weights.len()));
    }
    if count == 0 {
        return invalid("no clients to aggregate");
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return invalid("weights must be finite and nonnegative");
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return invalid(format!("weights sum to {total}, expected 1"));
    }
    Ok(())
}

fn weighted_sum<'a>(items: impl Iterator<Item = &'a Matrix>, weights: &[f64]) -> Result<Matrix> {
    let mut acc: Option<Matrix> = None;
    for (m, &w) in items.zip(weights) {
        match acc.as_mut() {
            None => acc = Some(m.scale(w)),
            Some(total) => {
                if !total.same_shape(m) {
                    return invalid("client factors disagree in shape");
                }
                total.axpy(w, m);
            }
        }
    }
    acc.ok_or_else(|| crate::Error::InvalidInput("no clients to aggregate".into()))
}

/// `(Σ p_i b_i)(Σ p_i a_i)`.
pub fn aggregate_factor_product(clients: &[(Matrix, Matrix)], weights: &[f64]) -> Result<AggregatedDelta> {
    check_weights(weights, clients.len())?;
    let b = weighted_sum(clients.iter().map(|(b, _)| b), weights)?;
    let a = weighted_sum(clients.iter().map(|(_, a)| a), weights)?;
    if b.cols() != a.rows() {
        return invalid("factor ranks disagree");
    }
    Ok(AggregatedDelta {
        delta: b.dot(&a),
        mode: AggregationMode::FactorProduct,
    })
}

/// `(Σ p_i b_i) · a0`.
pub fn aggregate_frozen_a(bs: &[Matrix], a0: &Matrix, weights: &[f64]) -> Result<AggregatedDelta> {
    check_weights(weights, bs.len())?;
    let b = weighted_sum(bs.iter(), weights)?;
    if b.cols() != a0.rows() {
        return invalid("frozen factor rank disagrees with client factors");
    }
    Ok(AggregatedDelta {
        delta: b.dot(a0),
        mode: AggregationMode::FrozenA,
    })
}

/// `Σ p_i b_i a_i`.
pub fn aggregate_lifted(clients: &[(Matrix, Matrix)], weights: &[f64]) -> Result<AggregatedDelta> {
    check_weights(weights, clients.len())?;
    for (b, a) in clients {
        if b.cols() != a.rows() {
            return invalid("client factor ranks disagree");
        }
    }
    let products: Vec<Matrix> = clients.iter().map(|(b, a)| b.dot(a)).collect();
    Ok(AggregatedDelta {
        delta: weighted_sum(products.iter(), weights)?,
        mode: AggregationMode::Lifted,
    })
}

pub fn mismatch_report(delta: &Matrix, r: usize) -> Result<MismatchReport> {
    Ok(MismatchReport {
        tail: tail_distance(delta, r)?,
        numeric_rank: numeric_rank(delta, RANK_RTOL)?,
    })
}
