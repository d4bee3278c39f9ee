//! Seed fan-out.
//!
//! Every random draw in a run derives from one top-level `u64` seed. Each
//! subsystem owns a fixed ChaCha8 stream id (the [`Stream`] discriminant), and
//! generators are built as `ChaCha8Rng::seed_from_u64(seed)` followed by
//! `set_stream(stream as u64)`. Streams never overlap, so adding draws in one
//! subsystem leaves every other subsystem's sequence untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    EncoderInit = 1,
    DiscriminatorInit = 2,
    Negatives = 3,
    DiscriminatorSubsample = 4,
    EdgeShuffle = 5,
    Classifier = 6,
    Synth = 7,
    Permutation = 8,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A derived seed for per-graph or per-run sub-seeding (splitmix64 finalizer).
pub fn derive(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
