use serde::{Deserialize, Serialize};

use super::{FedConfig, GlobalState, OptimizerKind, ServerAggregation};
use crate::adapters::{effective_weight, LoraParams};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::optim::{
    adamw_step, galore_adamw_step, make_projector, momentum_step, project, sgd_step,
    AdaptiveBasis, DenseAdamState, GaLoreSchedule, GaLoreState, MomentumState, ProjectionMode,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LoraOptState {
    Sgd,
    Adam { a: DenseAdamState, b: DenseAdamState },
}

/// Per-client optimizer state at the start or end of a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClientState {
    Sgd,
    Momentum(MomentumState),
    Adamw(DenseAdamState),
    Galore(GaLoreState),
    /// LoRA factors over the round's base weight plus their optimizer state.
    Lora {
        params: LoraParams,
        opt: LoraOptState,
        freeze_a: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalRun {
    pub theta: Matrix,
    pub state: ClientState,
    /// Parameters before every step and after the last one, `T + 1` entries.
    pub trajectory: Vec<Matrix>,
}

/// Optimizer state a participant starts round `gs.round` with.
///
/// GaLore clients use the basis seeded by `gs.seed`; a synchronized `v_bar` is
/// projected into that basis and clamped at 0. Dense AdamW clients take
/// `v_bar` as is. First moments start at zero and bias correction restarts
/// with the round.
pub fn init_client_state(gs: &GlobalState, cfg: &FedConfig) -> Result<ClientState> {
    let (rows, cols) = gs.theta_bar.shape();
    Ok(match cfg.optimizer {
        OptimizerKind::Sgd => ClientState::Sgd,
        OptimizerKind::Momentum => ClientState::Momentum(MomentumState::zeros(rows, cols)),
        OptimizerKind::Adamw => {
            let mut s = DenseAdamState::zeros(rows, cols);
            if let Some(v) = &gs.v_bar {
                if v.shape() != (rows, cols) {
                    return invalid("synchronized second moment has the wrong shape");
                }
                s.v = v.clamp_min(0.0);
            }
            ClientState::Adamw(s)
        }
        OptimizerKind::GaloreAdamw => {
            let projector =
                make_projector(&gs.theta_bar, cfg.rank, ProjectionMode::Seeded(gs.seed))?;
            let schedule = GaLoreSchedule {
                rank: cfg.rank,
                refresh_period: cfg.refresh_period,
                adaptive_refreshes: cfg.adaptive_refreshes,
                adaptive_basis: AdaptiveBasis::Svd,
                first_seed: gs.seed,
                v_reprojection: cfg.v_reprojection,
            };
            let mut s = GaLoreState::with_projector(rows, cols, projector, &schedule)?;
            if let Some(v) = &gs.v_bar {
                let p = s.projector.as_ref().expect("set by with_projector");
                s.v_proj = project(v, p)?.clamp_min(0.0);
            }
            ClientState::Galore(s)
        }
        OptimizerKind::LoraAdamw | OptimizerKind::LoraSgd => {
            let mut params = LoraParams::init(gs.theta_bar.clone(), cfg.rank, cfg.lora_seed(gs.round))?;
            params.scaling = cfg.lora_scaling;
            let opt = if cfg.optimizer == OptimizerKind::LoraAdamw {
                LoraOptState::Adam {
                    a: DenseAdamState::zeros(params.a.rows(), params.a.cols()),
                    b: DenseAdamState::zeros(params.b.rows(), params.b.cols()),
                }
            } else {
                LoraOptState::Sgd
            };
            ClientState::Lora {
                params,
                opt,
                freeze_a: cfg.aggregation == ServerAggregation::FrozenA,
            }
        }
    })
}

fn diverged(step: usize, reason: &str) -> Error {
    Error::Diverged {
        step,
        reason: reason.to_string(),
    }
}

/// Runs `cfg.local_steps` optimizer steps from `theta0`, drawing gradients
/// from `grad`. LoRA states ignore `theta0` in favour of their base weight.
pub fn local_train(
    theta0: &Matrix,
    init: ClientState,
    grad: &mut dyn FnMut(&Matrix) -> Matrix,
    cfg: &FedConfig,
) -> Result<LocalRun> {
    if cfg.local_steps == 0 {
        return invalid("local_train needs at least one step");
    }
    let mut state = init;
    let mut theta = match &state {
        ClientState::Lora { params, .. } => effective_weight(params)?,
        _ => theta0.clone(),
    };
    let mut trajectory = Vec::with_capacity(cfg.local_steps + 1);
    trajectory.push(theta.clone());
    for step in 0..cfg.local_steps {
        let g = grad(&theta);
        if g.shape() != theta.shape() {
            return invalid(format!("gradient {:?} vs parameter {:?}", g.shape(), theta.shape()));
        }
        if !g.is_finite() {
            return Err(diverged(step, "non-finite gradient"));
        }
        let (next, next_state) = match state {
            ClientState::Sgd => (sgd_step(&theta, &g, cfg.lr)?, ClientState::Sgd),
            ClientState::Momentum(s) => {
                let (t, s) = momentum_step(&theta, &s, &g, cfg.lr, cfg.momentum)?;
                (t, ClientState::Momentum(s))
            }
            ClientState::Adamw(s) => {
                let (t, s) = adamw_step(&theta, &s, &g, &cfg.adam)?;
                (t, ClientState::Adamw(s))
            }
            ClientState::Galore(s) => {
                let (t, s) = galore_adamw_step(&theta, &s, &g, &cfg.adam)?;
                (t, ClientState::Galore(s))
            }
            ClientState::Lora {
                mut params,
                opt,
                freeze_a,
            } => {
                let (grad_a, grad_b) = params.factor_grads(&g);
                let opt = match opt {
                    LoraOptState::Sgd => {
                        if !freeze_a {
                            params.a.axpy(-cfg.lr, &grad_a);
                        }
                        params.b.axpy(-cfg.lr, &grad_b);
                        LoraOptState::Sgd
                    }
                    LoraOptState::Adam { a, b } => {
                        let a = if freeze_a {
                            a
                        } else {
                            let (na, sa) = adamw_step(&params.a, &a, &grad_a, &cfg.adam)?;
                            params.a = na;
                            sa
                        };
                        let (nb, sb) = adamw_step(&params.b, &b, &grad_b, &cfg.adam)?;
                        params.b = nb;
                        LoraOptState::Adam { a, b: sb }
                    }
                };
                (
                    effective_weight(&params)?,
                    ClientState::Lora {
                        params,
                        opt,
                        freeze_a,
                    },
                )
            }
        };
        if !next.is_finite() {
            return Err(diverged(step, "non-finite parameters"));
        }
        theta = next;
        state = next_state;
        trajectory.push(theta.clone());
    }
    Ok(LocalRun {
        theta,
        state,
        trajectory,
    })
}
