//! Seeded random streams.
//!
//! All randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded via
//! `seed_from_u64`, with an explicit stream id per consumer so that e.g. data
//! generation and weight initialisation never share a stream. Uniforms take
//! the top 53 bits of `next_u64`; normals use the cosine branch of Box–Muller
//! on two consecutive uniforms. That is enough to replicate a stream outside
//! Rust.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution};

/// Name recorded in dataset files.
pub const RNG_ALGORITHM: &str = "chacha20-boxmuller-v1";

/// Stream ids; one per consumer of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Outlier = 4,
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream as u64);
        SeededRng { inner }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal.
    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        Beta::new(a, b)
            .expect("beta parameters must be positive")
            .sample(&mut self.inner)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
