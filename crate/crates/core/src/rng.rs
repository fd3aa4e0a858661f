//! Keyed random streams.
//!
//! Each stream is a ChaCha8 generator whose key is `(master_seed, tag)` and
//! whose stream id is a caller-chosen counter (task id, iteration, ...).
//! Streams never share state, so drawing more from one of them cannot shift
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    /// Per-task hyperparameters (amplitude, phase, class means, quadratic A and c).
    TaskParams = 1,
    Support = 2,
    Query = 3,
    /// Second query draw used when the final update resamples D'_m.
    QueryResample = 4,
    /// Per-step support subsampling inside the inner loop.
    Subsample = 5,
    /// Model initialization.
    Init = 6,
    /// SWP Bernoulli masks (keyed by iteration).
    WeightMask = 7,
    Directions = 8,
    Sharpness = 9,
    Probes = 10,
    /// Pool index draw for finite task pools.
    PoolIndex = 11,
}

pub fn stream(master_seed: u64, tag: StreamTag, id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(tag as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(id);
    rng
}
