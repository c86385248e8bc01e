//! Seeded random streams.
//!
//! Every stochastic component draws from [`SeededRng`], a ChaCha8 stream cipher used as a
//! counter-based generator. A generator is identified by `(seed, stream)`; distinct stream ids
//! under one seed are independent, so a single trial seed can drive instance generation and
//! mini-batch sampling without the two interfering.
//!
//! The derived draws are fixed as follows, so that identical seeds reproduce identical
//! instances and batch sequences bit for bit:
//!
//! - `uniform`: the top 53 bits of the next `u64`, scaled by `2^-53`, giving a value in `[0, 1)`.
//! - `below(n)`: rejection sampling on `u64` draws; values in the final partial bucket of
//!   `2^64 mod n` are discarded, then the remainder modulo `n` is returned.
//! - `standard_normal`: Box–Muller. Two uniforms `u1 = 1 - uniform()` (in `(0, 1]`) and
//!   `u2 = uniform()` yield `sqrt(-2 ln u1) cos(2 pi u2)`, returned first, and
//!   `sqrt(-2 ln u1) sin(2 pi u2)`, cached and returned by the next call.
//! - `shuffle`: Fisher–Yates from the last position down, swapping `i` with `below(i + 1)`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream id used for instance generation.
pub const INSTANCE_STREAM: u64 = 0;
/// Stream id used for mini-batch sampling.
pub const SAMPLER_STREAM: u64 = 1;

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            inner,
            spare_normal: None,
        }
    }

    /// Generator for trial `trial` of an experiment seeded with `base_seed`.
    pub fn for_trial(base_seed: u64, trial: u64, stream: u64) -> Self {
        Self::with_stream(base_seed.wrapping_add(trial), stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let reject_from = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= reject_from {
                return (v % n) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
