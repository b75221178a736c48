//! Seed derivation and the pinned random stream.
//!
//! Encoder and decoder regenerate the orthogonal transform and the
//! sub-vector shuffle from seeds instead of transmitting them, so both the
//! derivation rule and the sampling procedures below are part of the wire
//! format (see `docs/wire-format.md`). Do not change them without bumping the
//! format version.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::math::normal_quantile;

/// Domain separation tags for [`derive_seed`].
pub mod tag {
    pub const TRANSFORM: u64 = 0x01;
    pub const SHUFFLE: u64 = 0x02;
    pub const PARTICIPANTS: u64 = 0x03;
    pub const MINIBATCH: u64 = 0x04;
    pub const MODEL_INIT: u64 = 0x05;
    pub const PARTITION: u64 = 0x06;
    pub const PLACEMENT: u64 = 0x07;
    pub const SYNTHETIC_DATA: u64 = 0x08;
}

/// SplitMix64 finalizer.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a master seed, a domain tag and three coordinates into one seed.
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = mix64(master ^ tag.rotate_left(56));
    h = mix64(h ^ a);
    h = mix64(h ^ b.rotate_left(21));
    mix64(h ^ c.rotate_left(42))
}

/// How transform and shuffle seeds vary over an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeedScope {
    /// A fresh matrix and permutation for every (round, device, sub-vector).
    PerRound,
    /// One matrix per dimension and one permutation per experiment; lets
    /// both ends cache the matrices.
    Static,
}

/// Everything needed to regenerate the shared randomness of one payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedContext {
    pub master: u64,
    pub round: u64,
    pub device: u64,
    pub scope: SeedScope,
}

impl SeedContext {
    pub fn new(master: u64, round: u64, device: u64, scope: SeedScope) -> Self {
        Self { master, round, device, scope }
    }

    /// Seed of the orthogonal matrix used for sub-vector `subvector` when the
    /// transformed dimension is `dim`.
    pub fn transform_seed(&self, subvector: u64, dim: u64) -> u64 {
        match self.scope {
            SeedScope::PerRound => derive_seed(self.master, tag::TRANSFORM, self.round, self.device, subvector),
            SeedScope::Static => derive_seed(self.master, tag::TRANSFORM, u64::MAX, dim, 0),
        }
    }

    /// Seed of the sub-vector shuffle.
    pub fn shuffle_seed(&self) -> u64 {
        match self.scope {
            SeedScope::PerRound => derive_seed(self.master, tag::SHUFFLE, self.round, self.device, 0),
            SeedScope::Static => derive_seed(self.master, tag::SHUFFLE, u64::MAX, 0, 0),
        }
    }
}

/// Deterministic random stream: ChaCha20 keyed by a 64-bit seed.
#[derive(Clone)]
pub struct Stream {
    inner: ChaCha20Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&s.to_le_bytes());
            s = mix64(s);
        }
        Self { inner: ChaCha20Rng::from_seed(key) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard Gaussian by inversion of the normal CDF.
    pub fn gaussian(&mut self) -> f64 {
        normal_quantile(self.uniform())
    }

    /// Unbiased integer in `[0, bound)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let mut m = (self.next_u64() as u128) * (bound as u128);
        let mut low = m as u64;
        if low < bound {
            let threshold = bound.wrapping_neg() % bound;
            while low < threshold {
                m = (self.next_u64() as u128) * (bound as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// In-place Fisher-Yates shuffle, last index first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order (partial Fisher-Yates).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> alloc::vec::Vec<usize> {
        assert!(k <= n);
        let mut pool: alloc::vec::Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// Access for samplers from `rand_distr`.
    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.inner
    }
}
