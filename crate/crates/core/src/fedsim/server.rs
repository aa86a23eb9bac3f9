use super::{ClientDelta, ClientUpdate, FedConfig, GlobalState, OptimizerKind, ServerAggregation, SyncMode};
use crate::adapters::{aggregate_factor_product, aggregate_frozen_a, aggregate_lifted, check_weights};
use crate::ajive::{joint_average, sync_second_moments};
use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::optim::{make_projector, project_back, ProjectionMode};

/// `k` distinct clients out of `m`, uniformly at random, in increasing order.
pub fn sample_participants(m: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > m {
        return invalid(format!("cannot sample {k} of {m} clients"));
    }
    let mut ids: Vec<usize> = (0..m).collect();
    if k < m {
        SeededRng::new(seed).shuffle(&mut ids);
        ids.truncate(k);
        ids.sort_unstable();
    }
    Ok(ids)
}

/// Weights of the participating clients rescaled to sum to one.
pub fn renormalize_weights(weights: &[f64], participants: &[usize]) -> Result<Vec<f64>> {
    if participants.is_empty() {
        return invalid("no participants");
    }
    let mut out = Vec::with_capacity(participants.len());
    for &i in participants {
        match weights.get(i) {
            Some(&w) if w >= 0.0 && w.is_finite() => out.push(w),
            Some(_) => return invalid(format!("weight of client {i} is not a nonnegative number")),
            None => return invalid(format!("client {i} has no weight")),
        }
    }
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return invalid("participating weights sum to zero");
    }
    Ok(out.into_iter().map(|w| w / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub theta: Matrix,
    pub delta: Matrix,
}

/// Applies the weighted combination of the client deltas to `theta_bar`.
/// Adapter modes read `left` as the scaled up projection and `right` as the
/// down projection of each factored delta.
pub fn server_aggregate(
    theta_bar: &Matrix,
    updates: &[ClientUpdate],
    weights: &[f64],
    mode: ServerAggregation,
) -> Result<Aggregate> {
    if updates.is_empty() {
        return invalid("no client updates to aggregate");
    }
    check_weights(weights, updates.len())?;
    let delta = match mode {
        ServerAggregation::FedavgDense => {
            let mut acc = Matrix::zeros(theta_bar.rows(), theta_bar.cols());
            for (u, &w) in updates.iter().zip(weights) {
                let d = u.delta.to_dense();
                if !d.same_shape(&acc) {
                    return invalid(format!("client {} delta has shape {:?}", u.client_id, d.shape()));
                }
                acc.axpy(w, &d);
            }
            acc
        }
        adapter => {
            let pairs = updates
                .iter()
                .map(|u| match &u.delta {
                    ClientDelta::Factored { left, right } => Ok((left.clone(), right.clone())),
                    ClientDelta::Dense(_) => invalid(format!(
                        "client {} sent a dense delta under adapter aggregation",
                        u.client_id
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            match adapter {
                ServerAggregation::FactorProduct => aggregate_factor_product(&pairs, weights)?.delta,
                ServerAggregation::Lifted => aggregate_lifted(&pairs, weights)?.delta,
                ServerAggregation::FrozenA => {
                    let a0 = pairs[0].1.clone();
                    if pairs.iter().any(|(_, a)| *a != a0) {
                        return invalid("frozen-A aggregation needs one shared down projection");
                    }
                    let bs: Vec<Matrix> = pairs.into_iter().map(|(b, _)| b).collect();
                    aggregate_frozen_a(&bs, &a0, weights)?.delta
                }
                ServerAggregation::FedavgDense => unreachable!(),
            }
        }
    };
    if !delta.same_shape(theta_bar) {
        return invalid(format!("aggregate delta {:?} vs parameter {:?}", delta.shape(), theta_bar.shape()));
    }
    Ok(Aggregate {
        theta: theta_bar + &delta,
        delta,
    })
}

/// Ambient-shape view of a projected buffer in the basis generated by `seed`.
pub fn build_matrix_view(v_proj: &Matrix, seed: u64, rows: usize, cols: usize, r: usize) -> Result<Matrix> {
    let p = make_projector(&Matrix::zeros(rows, cols), r, ProjectionMode::Seeded(seed))?;
    project_back(v_proj, &p)
}

fn view_of(update: &ClientUpdate, cfg: &FedConfig, shape: (usize, usize)) -> Result<Matrix> {
    let v = update.v_proj.as_ref().ok_or_else(|| {
        Error::ProtocolViolation(format!("client {} sent no second moment", update.client_id))
    })?;
    if cfg.optimizer != OptimizerKind::GaloreAdamw {
        if v.shape() != shape {
            return invalid(format!("client {} second moment has shape {:?}", update.client_id, v.shape()));
        }
        return Ok(v.clone());
    }
    let seed = update.basis_seed.ok_or_else(|| {
        Error::ProtocolViolation(format!(
            "client {} ended the round in a basis no seed reproduces",
            update.client_id
        ))
    })?;
    build_matrix_view(v, seed, shape.0, shape.1, v.rows().min(v.cols()))
}

/// Updates the broadcast second moment from this round's uploads and moves the
/// basis seed to the next round.
pub fn state_sync(gs: &mut GlobalState, updates: &[ClientUpdate], weights: &[f64], cfg: &FedConfig) -> Result<()> {
    let shape = gs.theta_bar.shape();
    match cfg.sync_mode {
        SyncMode::None => {
            gs.v_bar = None;
        }
        mode => {
            check_weights(weights, updates.len())?;
            let views = updates
                .iter()
                .map(|u| view_of(u, cfg, shape))
                .collect::<Result<Vec<_>>>()?;
            let merged = match mode {
                SyncMode::ServerOnly => {
                    let mut acc = Matrix::zeros(shape.0, shape.1);
                    for (v, &w) in views.iter().zip(weights) {
                        acc.axpy(w, v);
                    }
                    acc
                }
                _ if views.len() == 1 => views[0].clone(),
                _ if cfg.optimizer == OptimizerKind::GaloreAdamw => joint_average(&views, cfg.rank, weights)?,
                _ => sync_second_moments(&views, cfg.rank, weights)?,
            };
            gs.v_bar = Some(merged);
        }
    }
    gs.seed = cfg.basis_seed(gs.round + 1);
    Ok(())
}
