//! Keyed random streams.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream whose
//! 256-bit seed is derived from `(seed, purpose, epoch, index)`. Streams for
//! different purposes never overlap, and a rerun with the same key replays
//! the same bits on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Plan,
    Batching,
    SpecAugment,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Plan => 0x706c_616e,
            Purpose::Batching => 0x6261_7463,
            Purpose::SpecAugment => 0x7370_6563,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the stream for `(seed, purpose, epoch, index)`.
pub fn keyed(seed: u64, purpose: Purpose, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut state = seed;
    for part in [purpose.tag(), epoch, index] {
        state = splitmix64(&mut state) ^ part;
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
