//! Seeded Gaussian noise streams.
//!
//! One simulation owns one seed. Every consumer draws from its own ChaCha
//! stream (`seed`, `stream id`), so the draws an agent sees do not depend on
//! how many other agents exist or in what order they are stepped.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream ids used by the highway scenario.
pub mod stream {
    /// Initial-condition sampling.
    pub const SETUP: u64 = 0;

    /// Process noise of agent `i`.
    pub const fn agent_process(i: usize) -> u64 {
        1 + 2 * i as u64
    }

    /// Measurement noise of agent `i`.
    pub const fn agent_measurement(i: usize) -> u64 {
        2 + 2 * i as u64
    }
}

/// SplitMix64 finaliser; used to derive child seeds from `(seed, index)`.
pub const fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// `N(mean, variance)` draw.
    pub fn normal(&mut self, mean: f64, variance: f64) -> f64 {
        mean + libm::sqrt(variance) * self.standard_normal()
    }

    /// Fills `out` with Wiener increments over `dt` (covariance `dt·I`).
    pub fn fill_increment(&mut self, out: &mut [f64], dt: f64) {
        let sd = libm::sqrt(dt);
        for v in out.iter_mut() {
            *v = sd * self.standard_normal();
        }
    }

    /// Wiener increment of dimension `dim` over `dt`.
    pub fn increment(&mut self, dim: usize, dt: f64) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        self.fill_increment(v.as_mut_slice(), dt);
        v
    }
}
