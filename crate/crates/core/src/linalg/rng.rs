//! Seeded random streams.
//!
//! Every stream is a ChaCha20 generator seeded through `seed_from_u64`, and
//! Gaussian draws use the Box–Muller transform below. Both pieces are
//! fully specified, so seeded bases and noise are reproducible across
//! platforms and crate versions that keep the ChaCha20 word stream stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::Matrix;

/// Mixes a base seed with a purpose tag (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic source of uniform and Gaussian variates.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.random::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal via Box–Muller; the second variate of each pair is cached.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn gaussian_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.gaussian()).collect()
    }

    /// Matrix filled row-major with N(0, std²) entries.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = self.gaussian_vec(rows * cols, std);
        Matrix::from_row_slice(rows, cols, &data).expect("length matches by construction")
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Access to the underlying generator for `rand_distr` samplers.
    pub fn raw(&mut self) -> &mut ChaCha20Rng {
        &mut self.inner
    }
}
