//! Counter-based random numbers with explicit, portable state.
//!
//! The generator is SplitMix64 evaluated at a counter: for a key `k` derived from
//! `(seed, stream)` the `c`-th output is
//!
//! ```text
//! mix(z) = { z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//!            z ^= z >> 27; z *= 0x94D049BB133111EB;
//!            z ^ (z >> 31) }                         (wrapping u64 arithmetic)
//! k      = mix(seed + 0x9E3779B97F4A7C15) ^ mix(stream * 0x9E3779B97F4A7C15 + 0xD1B54A32D192ED03)
//! out(c) = mix(k + c * 0x9E3779B97F4A7C15)
//! ```
//!
//! Only integer arithmetic is involved, so `(seed, stream, counter)` reproduces the
//! stream on every platform. Distributions on top come from `rand`/`rand_distr`.

use rand_core::{impls, RngCore};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    key: u64,
    counter: u64,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::with_counter(seed, stream, 0)
    }

    /// Resume a stream at a previously recorded counter.
    pub fn with_counter(seed: u64, stream: u64, counter: u64) -> Self {
        let key = mix64(seed.wrapping_add(GOLDEN))
            ^ mix64(stream.wrapping_mul(GOLDEN).wrapping_add(STREAM_SALT));
        Self {
            seed,
            stream,
            key,
            counter,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 64-bit words drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}
