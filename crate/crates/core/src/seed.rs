//! Deterministic per-task seeds, independent of worker count and scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a global seed with a task key such as `(i, j)` or a track id.
pub fn task_seed(global_seed: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(global_seed), |h, &k| splitmix64(h ^ splitmix64(k)))
}

pub fn task_rng(global_seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(task_seed(global_seed, key))
}
