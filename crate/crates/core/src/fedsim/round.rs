use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{init_client_state, local_train, ClientState, LocalRun};
use super::server::{renormalize_weights, sample_participants, server_aggregate, state_sync};
use super::{ClientDelta, ClientUpdate, FedConfig, GlobalState, SyncMode};
use crate::error::{invalid, Error, Result};
use crate::linalg::{numeric_rank, svd, tail_distance, Matrix, SeededRng, RANK_RTOL};
use crate::optim::ProjectorSource;
use crate::tasks::Federation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Global objective at the aggregated parameters.
    pub global_loss: f64,
    /// Weighted mean of the participants' losses at their final local iterates.
    pub mean_client_loss: f64,
    /// Frobenius distance of the aggregate delta from its best rank-`r` approximation.
    pub aggregate_tail: f64,
    pub aggregate_rank: usize,
    /// Largest distance between a local iterate and the deterministic
    /// full-gradient trajectory started from the same point.
    pub max_local_deviation: f64,
    pub participants: usize,
    /// Participants whose local run diverged and were left out.
    pub dropped: usize,
    /// True when every participant diverged and the global state was kept.
    pub failed: bool,
    pub uplink_floats: usize,
    pub sync_mode: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationRun {
    pub metrics: Vec<RoundMetrics>,
    pub state: GlobalState,
}

fn factor_exact(delta: &Matrix) -> Result<ClientDelta> {
    let k = numeric_rank(delta, RANK_RTOL)?.max(1);
    let f = svd(delta, Some(k))?;
    let left = Matrix::from_fn(f.u.rows(), k, |i, j| f.u.get(i, j) * f.s[j]);
    Ok(ClientDelta::Factored {
        left,
        right: f.v.transpose(),
    })
}

fn make_update(id: usize, theta_bar: &Matrix, run: &LocalRun, cfg: &FedConfig, loss: f64) -> Result<ClientUpdate> {
    let upload_v = cfg.sync_mode != SyncMode::None;
    let (delta, v_proj, basis_seed) = match &run.state {
        ClientState::Lora { params, .. } => (
            ClientDelta::Factored {
                left: params.b.scale(params.scaling),
                right: params.a.clone(),
            },
            None,
            None,
        ),
        ClientState::Galore(s) => {
            let seed = match s.projector.as_ref().map(|p| p.source) {
                Some(ProjectorSource::Seeded(seed)) => Some(seed),
                _ => None,
            };
            (
                factor_exact(&(&run.theta - theta_bar))?,
                upload_v.then(|| s.v_proj.clone()),
                if upload_v { seed } else { None },
            )
        }
        ClientState::Adamw(s) => (
            ClientDelta::Dense(&run.theta - theta_bar),
            upload_v.then(|| s.v.clone()),
            None,
        ),
        ClientState::Sgd | ClientState::Momentum(_) => (ClientDelta::Dense(&run.theta - theta_bar), None, None),
    };
    Ok(ClientUpdate {
        client_id: id,
        delta,
        v_proj,
        basis_seed,
        terminal_loss: loss,
    })
}

/// One communication round: sampling, parallel local training, aggregation
/// over the clients that stayed finite, and second-moment synchronization.
pub fn run_round(gs: &mut GlobalState, fed: &dyn Federation, cfg: &FedConfig) -> Result<RoundMetrics> {
    let round = gs.round;
    let participants = sample_participants(cfg.num_clients, cfg.participants, cfg.participation_seed(round))?;
    let theta_bar = gs.theta_bar.clone();
    let state: &GlobalState = gs;

    let reference = local_train(
        &theta_bar,
        init_client_state(state, cfg)?,
        &mut |t| fed.global_gradient(t),
        cfg,
    );

    let outcomes: Vec<Result<LocalRun>> = participants
        .par_iter()
        .map(|&i| {
            let mut rng = SeededRng::new(cfg.batch_seed(round, i));
            local_train(
                &theta_bar,
                init_client_state(state, cfg)?,
                &mut |t| fed.stochastic_gradient(i, t, &mut rng),
                cfg,
            )
        })
        .collect();

    let mut runs = Vec::with_capacity(participants.len());
    for (&i, outcome) in participants.iter().zip(outcomes) {
        match outcome {
            Ok(run) => runs.push((i, run)),
            Err(Error::Diverged { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let dropped = participants.len() - runs.len();

    let max_local_deviation = match &reference {
        Ok(r) => runs
            .iter()
            .flat_map(|(_, run)| run.trajectory.iter().zip(&r.trajectory))
            .map(|(a, b)| (a - b).frobenius_norm())
            .fold(0.0, f64::max),
        Err(_) => f64::NAN,
    };

    if runs.is_empty() {
        gs.seed = cfg.basis_seed(round + 1);
        gs.round += 1;
        return Ok(RoundMetrics {
            round,
            global_loss: fed.global_loss(&theta_bar),
            mean_client_loss: f64::NAN,
            aggregate_tail: 0.0,
            aggregate_rank: 0,
            max_local_deviation,
            participants: participants.len(),
            dropped,
            failed: true,
            uplink_floats: 0,
            sync_mode: cfg.sync_mode.tag().to_string(),
        });
    }

    let ids: Vec<usize> = runs.iter().map(|(i, _)| *i).collect();
    let weights = renormalize_weights(&cfg.weights(), &ids)?;
    let updates = runs
        .iter()
        .map(|(i, run)| make_update(*i, &theta_bar, run, cfg, fed.client_loss(*i, &run.theta)))
        .collect::<Result<Vec<_>>>()?;

    let agg = server_aggregate(&theta_bar, &updates, &weights, cfg.aggregation)?;
    let r = cfg.rank.min(agg.delta.rows().min(agg.delta.cols()));
    let aggregate_tail = tail_distance(&agg.delta, r)?;
    let aggregate_rank = numeric_rank(&agg.delta, RANK_RTOL)?;
    gs.theta_bar = agg.theta;
    state_sync(gs, &updates, &weights, cfg)?;
    gs.round += 1;

    Ok(RoundMetrics {
        round,
        global_loss: fed.global_loss(&gs.theta_bar),
        mean_client_loss: updates.iter().zip(&weights).map(|(u, w)| w * u.terminal_loss).sum(),
        aggregate_tail,
        aggregate_rank,
        max_local_deviation,
        participants: participants.len(),
        dropped,
        failed: false,
        uplink_floats: updates.iter().map(ClientUpdate::uplink_floats).sum(),
        sync_mode: cfg.sync_mode.tag().to_string(),
    })
}

/// Runs `cfg.rounds` rounds from `theta0`.
pub fn run_federation(fed: &dyn Federation, cfg: &FedConfig, theta0: Matrix) -> Result<FederationRun> {
    run_federation_with(fed, cfg, theta0, &mut |_| {})
}

/// [`run_federation`] that hands every round's metrics to `observe` as soon
/// as the round completes.
pub fn run_federation_with(
    fed: &dyn Federation,
    cfg: &FedConfig,
    theta0: Matrix,
    observe: &mut dyn FnMut(&RoundMetrics),
) -> Result<FederationRun> {
    cfg.validate()?;
    if fed.num_clients() != cfg.num_clients {
        return invalid(format!(
            "task has {} clients, config expects {}",
            fed.num_clients(),
            cfg.num_clients
        ));
    }
    if theta0.shape() != fed.shape() {
        return invalid(format!("initial parameter {:?} vs task {:?}", theta0.shape(), fed.shape()));
    }
    let mut state = GlobalState::new(theta0, cfg);
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let m = run_round(&mut state, fed, cfg)?;
        observe(&m);
        metrics.push(m);
    }
    Ok(FederationRun { metrics, state })
}

/// Largest gap, over `grid` evenly spaced points of the segment, between the
/// loss and the chord of the endpoint losses. Nonpositive for convex losses.
pub fn barrier(theta1: &Matrix, theta2: &Matrix, loss: &dyn Fn(&Matrix) -> f64, grid: usize) -> Result<f64> {
    if grid < 3 {
        return invalid("barrier grid needs at least 3 points");
    }
    if !theta1.same_shape(theta2) {
        return invalid("barrier endpoints differ in shape");
    }
    let (f1, f2) = (loss(theta1), loss(theta2));
    let mut worst = f64::NEG_INFINITY;
    for k in 0..grid {
        let lam = k as f64 / (grid - 1) as f64;
        let point = &theta1.scale(lam) + &theta2.scale(1.0 - lam);
        worst = worst.max(loss(&point) - (lam * f1 + (1.0 - lam) * f2));
    }
    Ok(worst)
}
