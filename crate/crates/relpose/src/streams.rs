//! Deterministic RNG substream derivation.
//!
//! Stochastic stages (correspondence sampling, minimal-set selection, scene
//! generation) each draw from their own ChaCha stream derived from the run
//! seed and a tag path, e.g. `(seed, [HYPOTHESIS, q, j])` for hypothesis `j`
//! of sampling round `q`. Because a stream never depends on how many draws
//! earlier stages consumed, a parallel traversal of hypotheses sees exactly
//! the same values as a serial one, and results are reproducible per
//! `(inputs, config, seed)`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags. Purely namespacing: any two distinct tag paths give
/// statistically independent streams.
pub mod tags {
    pub const SCENE: u64 = 1;
    pub const RENDER: u64 = 2;
    pub const SET_SAMPLE: u64 = 3;
    pub const HYPOTHESIS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TRAIN_ITER: u64 = 6;
    pub const GRADCHECK: u64 = 7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse a seed and one tag into a new seed. Handy when a callee expects
/// a plain `u64` seed rather than a stream.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut state = seed;
    let a = splitmix64(&mut state);
    let mut state = a ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    splitmix64(&mut state)
}

/// Derive the ChaCha stream for `(seed, tags...)`.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut folded = seed;
    for &tag in path {
        folded = mix(folded, tag);
    }
    let mut state = folded;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
