//! SplitMix64 generator.
//!
//! The simulator needs a stream that can be reproduced bit-for-bit from any
//! language, so the generator is the published SplitMix64 recurrence with
//! Box-Muller normals and Knuth Poisson draws on top.

use rand_core::{Rng, SeedableRng};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    inner: rand_xoshiro::SplitMix64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { inner: rand_xoshiro::SplitMix64::seed_from_u64(seed) }
    }

    /// Independent substream keyed by `(seed, stream, index)`.
    pub fn substream(seed: u64, stream: u64, index: u64) -> Self {
        let mut s = Self::new(seed ^ mix(stream.wrapping_mul(GOLDEN)));
        let k = s.next_u64() ^ mix(index.wrapping_add(1).wrapping_mul(GOLDEN));
        Self::new(k)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller (one draw per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn poisson(&mut self, lambda: f64) -> u32 {
        if lambda <= 0.0 {
            return 0;
        }
        let limit = (-lambda).exp();
        let mut k = 0;
        let mut p = self.next_f64();
        while p > limit {
            k += 1;
            p *= self.next_f64();
        }
        k
    }
}

/// The SplitMix64 finalizer applied to `z`.
fn mix(z: u64) -> u64 {
    SplitMix64::new(z.wrapping_sub(GOLDEN)).next_u64()
}
