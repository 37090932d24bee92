//! Independent random substreams keyed by (seed, purpose, a, b).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) mod purpose {
    pub const START: u64 = 1;
    pub const CHARACTERISTICS: u64 = 2;
    pub const DEMAND_SHOCK: u64 = 3;
    pub const COST_SHOCK: u64 = 4;
    pub const COST_SHIFTERS: u64 = 5;
    pub const TASTE_DRAWS: u64 = 6;
}

/// The four keys fill the 256-bit ChaCha seed directly, so distinct keys can
/// never share a stream.
pub(crate) fn substream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    for (chunk, v) in bytes.chunks_exact_mut(8).zip([seed, purpose, a, b]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
