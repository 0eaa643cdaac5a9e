//! Seed derivation and the random stream used by every simulation.
//!
//! All randomness comes from ChaCha8, a counter-based generator: the 64-bit
//! seed selects the key and a separate 64-bit stream id selects an
//! independent keystream under that key. Each simulation owns one seed and
//! draws its parameters, its frequency random walk and its noise from three
//! distinct stream ids, so changing how many values one consumer draws never
//! shifts the values seen by another.
//!
//! Per-item seeds are derived from a master seed and a path of integers
//! (class code, item index, ...) with the SplitMix64 finalizer, which gives
//! well-separated seeds for adjacent indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator type used throughout the crate.
pub type RandomStream = ChaCha8Rng;

/// Stream ids for the independent consumers inside one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Params = 1,
    Walk = 2,
    Noise = 3,
    Shuffle = 4,
    Init = 5,
    Dropout = 6,
}

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and an ordered path of integers.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(master), |acc, &p| mix64(acc ^ mix64(p.wrapping_add(0xA076_1D64_78BD_642F))))
}

/// Opens the keystream for `purpose` under `seed`.
pub fn stream(seed: u64, purpose: StreamPurpose) -> RandomStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
