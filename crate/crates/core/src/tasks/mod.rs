//! Synthetic objectives and data generators: Dirichlet label partitions, the
//! two-basin softmin landscape, second-moment views for AJIVE validation, and
//! heterogeneous quadratic client ensembles.

mod ajive_data;
mod landscape;
mod partition;
mod quadratic;

pub use ajive_data::{gen_ajive_validation, AjiveValidationConfig, AjiveValidationData};
pub use landscape::{
    classify, run_landscape_trials, run_trial, softmin_loss, Basin, LandscapeConfig,
    SoftminLandscape, TrapMethod, TrialConfig, TrialRates,
};
pub use partition::{dirichlet_partition, DirichletPartition};
pub use quadratic::{quad_grad, GradSample, QuadEnsemble, QuadEnsembleConfig};

use crate::linalg::{Matrix, SeededRng};

/// A set of client objectives over one matrix-shaped parameter.
pub trait Federation: Sync {
    fn num_clients(&self) -> usize;
    fn shape(&self) -> (usize, usize);
    fn client_loss(&self, i: usize, theta: &Matrix) -> f64;
    /// One stochastic gradient of client `i`, drawing its noise from `rng`.
    fn stochastic_gradient(&self, i: usize, theta: &Matrix, rng: &mut SeededRng) -> Matrix;
    fn global_loss(&self, theta: &Matrix) -> f64;
    /// Full-batch gradient of the weighted global objective.
    fn global_gradient(&self, theta: &Matrix) -> Matrix;
}
