//! Seeded random streams.
//!
//! Every random decision in a run draws from a stream keyed by the run seed,
//! a [`Purpose`] tag and a short tuple of indices (node, iteration, peer, ...).
//! Streams are ChaCha8 instances sharing one key derived from the seed and
//! separated by the 64-bit stream id, so any stream can be reconstructed in
//! isolation, in any order, on any thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Graph = 1,
    Data = 2,
    Period = 3,
    Neighbors = 4,
    Coordinates = 5,
    Batch = 6,
    Epsilon = 7,
    Oracle = 8,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_id(purpose: Purpose, ids: &[u64]) -> u64 {
    let mut h = splitmix64(purpose as u64);
    for &id in ids {
        h = splitmix64(h ^ splitmix64(id));
    }
    h
}

/// Builds the stream for `(seed, purpose, ids)`.
pub fn stream(seed: u64, purpose: Purpose, ids: &[u64]) -> Stream {
    let mut key = [0u8; 32];
    let mut state = seed;
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream_id(purpose, ids));
    rng
}
