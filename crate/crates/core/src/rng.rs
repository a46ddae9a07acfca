//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, realization, domain, stream, index)`:
//! the ChaCha20 key is derived from the first three, the ChaCha stream id
//! selects the stream and the word position selects the draw. Nothing is
//! carried between draws, so results do not depend on evaluation order or
//! thread count.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Separates independent consumers of the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    ExternalNoise = 1,
    MagneticNoise = 2,
    InternalNoise = 3,
    Sampling = 4,
    Bootstrap = 5,
    TestData = 6,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a tuple of words into one 64-bit id (used for composite stream ids).
pub fn mix(words: &[u64]) -> u64 {
    let mut state = 0x243f_6a88_85a3_08d3u64;
    let mut acc = 0u64;
    for &w in words {
        state ^= w;
        acc ^= splitmix64(&mut state);
        state = acc;
    }
    acc
}

#[derive(Clone)]
pub struct KeyedRng {
    rng: ChaCha20Rng,
}

impl std::fmt::Debug for KeyedRng {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyedRng").finish_non_exhaustive()
    }
}

impl KeyedRng {
    pub fn new(seed: u64, realization: u64, domain: Domain) -> Self {
        let mut state = seed ^ realization.rotate_left(32) ^ (domain as u64).rotate_left(17);
        let _ = splitmix64(&mut state);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        // fold realization and domain in a second time so that
        // (seed, realization) pairs cannot alias through the xor above
        let tag = mix(&[seed, realization, domain as u64]).to_le_bytes();
        for (k, t) in key.iter_mut().zip(tag.iter()) {
            *k ^= t;
        }
        Self {
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    fn words(&mut self, stream: u64, index: u64) -> (u64, u64) {
        self.rng.set_stream(stream);
        self.rng.set_word_pos(index as u128 * 4);
        (self.rng.next_u64(), self.rng.next_u64())
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self, stream: u64, index: u64) -> f64 {
        let (a, _) = self.words(stream, index);
        (a >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw (Box-Muller, cosine branch).
    pub fn normal(&mut self, stream: u64, index: u64) -> f64 {
        let (a, b) = self.words(stream, index);
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u2 = (b >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
