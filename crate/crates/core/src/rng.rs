//! Deterministic counter-based random number generation.
//!
//! All randomness in the crate flows through [`RngState`], a counter-based
//! splitmix64 generator: output `i` is `mix64(seed + (i+1) * GOLDEN)`, which
//! is the classic splitmix64 stream evaluated at an explicit counter. Because
//! each output is a pure function of `(seed, counter)`, streams replay
//! bit-identically across platforms and can be split into independent child
//! streams without sharing state.
//!
//! The algorithm identifier [`RNG_ALGORITHM`] is embedded in run manifests so
//! a report records exactly which generator produced it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier written into manifests alongside every seed.
pub const RNG_ALGORITHM: &str = "splitmix64ctr-v1";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer from splitmix64 (Steele, Lea & Flood; also murmur3's avalanche
/// with different constants).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator state. Cloning forks the stream at the current
/// position; [`RngState::split`] derives a statistically independent stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// The seed this stream was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// How many raw draws have been consumed.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Derive an independent child stream. The child's seed is a mix of this
    /// stream's seed and the tag, so `split(0)`, `split(1)`, ... are distinct
    /// streams that never overlap with the parent in practice.
    pub fn split(&self, tag: u64) -> RngState {
        RngState::new(mix64(self.seed ^ mix64(tag.wrapping_add(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform double in [0, 1) with 53 bits of precision.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound). Rejection sampling, so no modulo bias.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below: bound must be positive");
        // Reject draws below the threshold that makes the range divide evenly.
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let v = self.next_u64();
            if v >= threshold {
                return v % bound;
            }
        }
    }

    /// One pair of independent standard-normal draws via Box-Muller.
    /// Consumes exactly two uniforms.
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_unit();
        let u2 = self.next_unit();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        (radius * angle.cos(), radius * angle.sin())
    }

    /// Fill a buffer with `mean + std * z` draws. `std` must be nonnegative;
    /// `std == 0` yields `mean` everywhere while consuming the same number of
    /// draws, so call sequences stay aligned.
    pub fn fill_gaussian(&mut self, out: &mut [f64], mean: f64, std: f64) -> Result<()> {
        if !std.is_finite() || std < 0.0 || !mean.is_finite() {
            return Err(Error::Param(format!(
                "gaussian parameters must be finite with std >= 0, got mean={mean}, std={std}"
            )));
        }
        let mut i = 0;
        while i < out.len() {
            let (z0, z1) = self.next_gaussian_pair();
            out[i] = mean + std * z0;
            i += 1;
            if i < out.len() {
                out[i] = mean + std * z1;
                i += 1;
            }
        }
        Ok(())
    }
}
