//! Deterministic RNG substreams.
//!
//! Every randomized stage (spawning, detection noise, pilot noise, weight
//! init, shuffling) draws from its own ChaCha stream keyed by
//! `(master seed, stage tag, item index)`. Streams are independent of thread
//! scheduling, so parallel and sequential runs produce identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags. Denominated here so no two stages collide.
pub mod tag {
    pub const SPAWN: u64 = 0x01;
    pub const DIFFUSE: u64 = 0x02;
    pub const DETECT: u64 = 0x03;
    pub const PILOT: u64 = 0x04;
    pub const STATS: u64 = 0x05;
    pub const INIT: u64 = 0x06;
    pub const SHUFFLE: u64 = 0x07;
    pub const SAMPLE: u64 = 0x08;
    pub const ORACLE: u64 = 0x09;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A derived 64-bit seed for `(seed, tag, index)`, for handing to APIs that
/// take a plain seed.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    let mut s = seed ^ tag.rotate_left(24) ^ index.rotate_left(48) ^ 0xa076_1d64_78bd_642f;
    let a = splitmix64(&mut s);
    splitmix64(&mut s) ^ a.rotate_left(17)
}

/// Independent stream for `(seed, tag, index)`.
pub fn substream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ tag.rotate_left(24) ^ index.rotate_left(48);
    let mut key = [0u8; 32];
    // Mix the three inputs through four splitmix draws to fill the key.
    state = state.wrapping_add(splitmix64(&mut state));
    let mut s2 = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag;
    let mut s3 = index.wrapping_add(0xd1b5_4a32_d192_ed03);
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        let w = match i {
            0 => splitmix64(&mut state),
            1 => splitmix64(&mut s2),
            2 => splitmix64(&mut s3),
            _ => splitmix64(&mut state) ^ splitmix64(&mut s2),
        };
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
