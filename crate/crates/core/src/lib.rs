//! Federated low-rank fine-tuning simulator.
//!
//! Clients train with gradient-subspace optimizers (GaLore-style AdamW) or
//! LoRA adapters, a server aggregates their deltas, and projected second-moment
//! states can be synchronized through an AJIVE joint decomposition. Synthetic
//! tasks and bound checkers round out the library.

pub mod adapters;
pub mod ajive;
pub mod error;
pub mod fedsim;
pub mod linalg;
pub mod optim;
pub mod stats;
pub mod tasks;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::Matrix;
