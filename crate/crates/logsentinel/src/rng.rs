//! Seed management: one run seed, many named deterministic substreams.
//!
//! Every source of randomness in the pipeline (parameter init, epoch
//! shuffling, mask sampling, synthetic-corpus generation, detection-time
//! masking) draws from its own substream so that changing one stage's
//! consumption pattern never perturbs another stage.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_from(material: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = material;
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// A named substream of the run seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    stream_from(seed ^ fnv1a(name.as_bytes()))
}

/// A substream further keyed by an arbitrary string (e.g. a sequence's
/// group id), so per-item randomness is independent of processing order.
pub fn substream_keyed(seed: u64, name: &str, key: &str) -> ChaCha8Rng {
    stream_from(seed ^ fnv1a(name.as_bytes()) ^ fnv1a(key.as_bytes()).rotate_left(17))
}
