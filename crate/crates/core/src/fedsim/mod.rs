//! Federated round engine: local training, server aggregation, second-moment
//! synchronization over seeded matrix views, and participation sampling.

mod client;
mod round;
mod server;

use serde::{Deserialize, Serialize};

use crate::adapters::check_weights;
use crate::error::{invalid, Result};
use crate::linalg::{derive_seed, Matrix};
use crate::optim::{AdamHyper, VReprojection};

pub use client::{init_client_state, local_train, ClientState, LocalRun, LoraOptState};
pub use round::{barrier, run_federation, run_federation_with, run_round, FederationRun, RoundMetrics};
pub use server::{
    build_matrix_view, renormalize_weights, sample_participants, server_aggregate, state_sync,
    Aggregate,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adamw,
    GaloreAdamw,
    LoraAdamw,
    LoraSgd,
}

impl OptimizerKind {
    pub fn is_lora(self) -> bool {
        matches!(self, OptimizerKind::LoraAdamw | OptimizerKind::LoraSgd)
    }

    /// Whether the optimizer keeps a second moment that can be synchronized.
    pub fn has_second_moment(self) -> bool {
        matches!(self, OptimizerKind::Adamw | OptimizerKind::GaloreAdamw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerAggregation {
    /// `θ̄ + Σ p̃_i Δθ_i` on dense (or densified) deltas.
    FedavgDense,
    FactorProduct,
    FrozenA,
    Lifted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    /// Clients restart from zero optimizer states every round.
    None,
    /// Weighted average of the uploaded second-moment views.
    ServerOnly,
    /// Weighted average of the AJIVE joint parts of the views.
    Ajive,
}

impl SyncMode {
    pub fn tag(self) -> &'static str {
        match self {
            SyncMode::None => "none",
            SyncMode::ServerOnly => "server_only",
            SyncMode::Ajive => "ajive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub num_clients: usize,
    pub participants: usize,
    pub local_steps: usize,
    pub rounds: usize,
    /// Client weights; uniform when absent.
    pub client_weights: Option<Vec<f64>>,
    pub optimizer: OptimizerKind,
    pub aggregation: ServerAggregation,
    pub sync_mode: SyncMode,
    pub rank: usize,
    pub master_seed: u64,
    /// Step size for SGD, momentum and LoRA-SGD.
    pub lr: f64,
    /// Heavy-ball coefficient for the momentum optimizer.
    pub momentum: f64,
    /// Hyperparameters for every Adam-family optimizer.
    pub adam: AdamHyper,
    /// Projector refresh period inside a round; 0 keeps the round's seeded basis.
    pub refresh_period: usize,
    /// Data-driven refreshes before seeded bases take over inside a round.
    pub adaptive_refreshes: usize,
    pub v_reprojection: VReprojection,
    pub lora_scaling: f64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 10,
            participants: 10,
            local_steps: 10,
            rounds: 20,
            client_weights: None,
            optimizer: OptimizerKind::GaloreAdamw,
            aggregation: ServerAggregation::FedavgDense,
            sync_mode: SyncMode::Ajive,
            rank: 4,
            master_seed: 0,
            lr: 0.05,
            momentum: 0.9,
            adam: AdamHyper {
                lr: 0.01,
                ..AdamHyper::default()
            },
            refresh_period: 0,
            adaptive_refreshes: 0,
            v_reprojection: VReprojection::Clamp,
            lora_scaling: 1.0,
        }
    }
}

impl FedConfig {
    pub fn weights(&self) -> Vec<f64> {
        match &self.client_weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.num_clients as f64; self.num_clients],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return invalid("num_clients must be positive");
        }
        if self.participants == 0 || self.participants > self.num_clients {
            return invalid(format!(
                "participants exceed clients ({} of {})",
                self.participants, self.num_clients
            ));
        }
        if self.local_steps == 0 {
            return invalid("local_steps must be positive");
        }
        if self.rank == 0 {
            return invalid("rank must be positive");
        }
        check_weights(&self.weights(), self.num_clients)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must lie in [0, 1)");
        }
        self.adam.validate()?;
        let adapter_mode = self.aggregation != ServerAggregation::FedavgDense;
        if adapter_mode != self.optimizer.is_lora() {
            return invalid(format!(
                "aggregation {:?} is incompatible with optimizer {:?}",
                self.aggregation, self.optimizer
            ));
        }
        if self.sync_mode != SyncMode::None && !self.optimizer.has_second_moment() {
            return invalid(format!(
                "sync mode {:?} needs an optimizer with a second moment",
                self.sync_mode
            ));
        }
        if self.optimizer == OptimizerKind::GaloreAdamw
            && self.adaptive_refreshes > 0
            && self.sync_mode != SyncMode::None
        {
            return invalid("synchronized buffers need seeded bases; set adaptive_refreshes to 0");
        }
        Ok(())
    }

    /// Seed of round `round`'s participant draw.
    pub fn participation_seed(&self, round: usize) -> u64 {
        derive_seed(derive_seed(self.master_seed, TAG_PARTICIPANTS), round as u64)
    }

    /// Seed of client `client`'s gradient noise in round `round`.
    pub fn batch_seed(&self, round: usize, client: usize) -> u64 {
        derive_seed(
            derive_seed(derive_seed(self.master_seed, TAG_BATCHES), round as u64),
            client as u64,
        )
    }

    /// Seed of the projection basis broadcast for round `round`.
    pub fn basis_seed(&self, round: usize) -> u64 {
        derive_seed(derive_seed(self.master_seed, TAG_BASIS), round as u64)
    }

    /// Seed of the shared LoRA down projection drawn for round `round`.
    pub fn lora_seed(&self, round: usize) -> u64 {
        derive_seed(derive_seed(self.master_seed, TAG_LORA), round as u64)
    }
}

const TAG_PARTICIPANTS: u64 = 0x7061_7274;
const TAG_BATCHES: u64 = 0x6261_7463;
const TAG_LORA: u64 = 0x6c6f_7261;
const TAG_BASIS: u64 = 0x6261_7369;

/// A client's parameter delta, dense or as `left · right`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClientDelta {
    Dense(Matrix),
    Factored { left: Matrix, right: Matrix },
}

impl ClientDelta {
    pub fn to_dense(&self) -> Matrix {
        match self {
            ClientDelta::Dense(d) => d.clone(),
            ClientDelta::Factored { left, right } => left.dot(right),
        }
    }

    pub fn floats(&self) -> usize {
        match self {
            ClientDelta::Dense(d) => d.len(),
            ClientDelta::Factored { left, right } => left.len() + right.len(),
        }
    }
}

/// What one client uploads at the end of a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: ClientDelta,
    /// Second moment: projected for GaLore clients, dense for AdamW clients.
    pub v_proj: Option<Matrix>,
    /// Seed of the basis `v_proj` is expressed in, for projected buffers.
    pub basis_seed: Option<u64>,
    pub terminal_loss: f64,
}

impl ClientUpdate {
    /// Uploaded payload size: delta entries, buffer entries and one seed index.
    pub fn uplink_floats(&self) -> usize {
        self.delta.floats()
            + self.v_proj.as_ref().map_or(0, Matrix::len)
            + usize::from(self.basis_seed.is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub theta_bar: Matrix,
    /// Synchronized second moment in the ambient shape.
    pub v_bar: Option<Matrix>,
    pub round: usize,
    /// Basis seed broadcast for the current round.
    pub seed: u64,
}

impl GlobalState {
    pub fn new(theta0: Matrix, cfg: &FedConfig) -> Self {
        GlobalState {
            theta_bar: theta0,
            v_bar: None,
            round: 0,
            seed: cfg.basis_seed(0),
        }
    }
}
