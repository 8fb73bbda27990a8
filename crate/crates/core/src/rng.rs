//! Seeded, counter-based random streams.
//!
//! Every consumer derives its own stream from `(seed, stream id)` so that a run
//! can be resumed at any step without persisting generator state.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream ids for the different consumers of randomness.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TEACHER: u64 = 2;
    pub const DATA: u64 = 3;
    pub const SHUFFLE: u64 = 4 << 32;
    pub const STEP: u64 = 5 << 32;
    pub const SAMPLE: u64 = 6 << 32;
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, 0)
    }

    /// Independent stream `stream` of the generator keyed by `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f32 {
        let z: f64 = self.inner.sample(StandardNormal);
        z as f32
    }

    pub fn normals(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}
