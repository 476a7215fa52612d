//! Deterministic per-trajectory random streams.
//!
//! Every trajectory draws its noise from a ChaCha8 generator keyed by the
//! global seed and switched to the stream numbered by the trajectory index.
//! The noise of trajectory `k` therefore does not depend on how trajectories
//! are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies the noise sequence of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub global_seed: u64,
    pub trajectory_index: u64,
}

impl RngStream {
    pub fn new(global_seed: u64, trajectory_index: u64) -> Self {
        Self { global_seed, trajectory_index }
    }

    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.global_seed);
        rng.set_stream(self.trajectory_index);
        rng
    }
}

/// Derives an independent sub-seed, e.g. one per gradient step.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ tag.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
