//! Counter-based seed derivation, so any (trial, user, service) stream can be
//! regenerated independently of how the work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed number `index` of `parent`.
pub fn derive(parent: u64, index: u64) -> u64 {
    mix(parent ^ mix(index))
}

/// Seed of trial `trial` under the experiment's root seed.
pub fn trial_seed(root: u64, trial: u64) -> u64 {
    mix(root ^ trial)
}

/// Generator for `(item, stream)`, e.g. `(user, service)`.
pub fn stream_rng(seed: u64, item: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, item));
    rng.set_stream(stream);
    rng
}
