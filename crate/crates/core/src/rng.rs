//! Named random streams.
//!
//! Every random draw in the crate comes from one run seed. Sub-streams are
//! keyed by a stream tag and up to two integer coordinates (iteration, layer
//! index, ...), so a draw never depends on how many draws happened elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. The numeric values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Dropout = 3,
    Synth = 4,
    EvalData = 5,
    EvalPairs = 6,
    Check = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, stream, a, b)`.
pub fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed);
    for (i, word) in [stream as u64, a, b, 0x5D6D_u64].into_iter().enumerate() {
        h = splitmix64(h ^ word);
        key[i * 8..(i + 1) * 8].copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
