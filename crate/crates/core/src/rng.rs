//! Seeded, splittable randomness.
//!
//! Every stochastic operation in the crate takes an explicit [`Stream`]
//! handle. Streams are derived from a root seed plus a string label, so
//! independent components (env rollouts, dropout, latent sampling, ...)
//! never share state and a run is reproducible from its seed alone.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A single random stream. Cheap to create, deterministic per (seed, label).
pub struct Stream {
    rng: ChaCha8Rng,
    seed: u64,
    label: String,
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        Self::derive(seed, "root")
    }

    /// Derive an independent stream from a seed and a label.
    pub fn derive(seed: u64, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        Stream {
            rng: ChaCha8Rng::from_seed(key),
            seed,
            label: label.to_string(),
        }
    }

    /// Split off a child stream; the parent is unaffected.
    pub fn split(&self, label: &str) -> Stream {
        Stream::derive(self.seed, &format!("{}/{}", self.label, label))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform_in(lo, hi)).collect()
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}
