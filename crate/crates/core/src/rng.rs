//! Deterministic random number generation.
//!
//! Every random choice in this crate flows through [`Rng`], a thin wrapper
//! around the ChaCha20 stream cipher keyed by a 64-bit seed. The mappings
//! from the raw stream to floats, ranges and shuffles are spelled out here
//! so that corpora and training runs can be reproduced bit-for-bit by any
//! implementation:
//!
//! - `uniform`: take the top 53 bits of the next u64 and scale by 2^-53.
//! - `below(n)`: rejection-sampled `u64 % n` (no modulo bias).
//! - `shuffle`: Fisher-Yates from the back, partner drawn with `below`.
//!
//! Independent streams are derived from a master seed with [`derive_seed`],
//! a SplitMix64 mix over the seed, a purpose tag and an index. Training,
//! Fisher estimation and head re-initialization each get their own stream,
//! so adding a consumer to one stage never perturbs another.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

/// ChaCha20-backed generator with documented value mappings.
pub struct Rng(ChaCha20Rng);

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform usize in [0, n). Panics if n == 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // Reject the tail of the u64 range that would bias the modulo.
        let limit = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < limit {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform usize in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn choice<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len())]
    }
}

/// Derive an independent stream seed from a master seed, a purpose tag and
/// an index (SplitMix64 finalizer over the mixed inputs).
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = base ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = h.wrapping_add(b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h = h.wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
