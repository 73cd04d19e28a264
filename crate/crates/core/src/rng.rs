//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by the run seed and a stream tag, so stages do not share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Derives an independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// A seed for `(seed, stream)`, for APIs that take a plain seed.
pub fn derive(seed: u64, stream_tag: u64) -> u64 {
    use rand::RngCore;
    stream(seed, stream_tag).next_u64()
}

/// `len` values drawn uniformly from `[lo, hi)`.
pub fn uniform_values(seed: u64, stream_tag: u64, len: usize, lo: f64, hi: f64) -> alloc::vec::Vec<f64> {
    use rand::Rng as _;
    let mut rng = stream(seed, stream_tag);
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub mod tags {
    pub const SYNTH: u64 = 1;
    pub const HOLISTIC_INIT: u64 = 2;
    pub const PATCH_INIT: u64 = 100;
    pub const PATCH_TRAIN: u64 = 200;
    pub const NEGATIVES: u64 = 300;
    pub const CLASSIFIER: u64 = 400;
    pub const GRADCHECK: u64 = 500;
    pub const BACKGROUND: u64 = 600;
    pub const GRADCHECK_INPUTS: u64 = 700;
}
