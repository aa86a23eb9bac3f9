//! Dense linear algebra: the matrix type, seeded randomness, Householder QR,
//! exact and randomized SVD, and the truncation and subspace metrics built on them.

mod matrix;
mod qr;
mod rng;
mod svd;

pub use matrix::Matrix;
pub use qr::{householder_qr, orthonormalize_columns};
pub use rng::{derive_seed, SeededRng};
pub use svd::{
    codimension, max_principal_angle, numeric_rank, principal_angles, randomized_svd,
    rank_r_truncate, seeded_orthonormal, singular_values, svd, symmetric_eigen, tail_distance,
    SvdFactors,
    RANK_RTOL,
};
