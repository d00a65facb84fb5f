//! Counter-style seeding: every random draw in the crate is addressed by a
//! (seed, stream) pair so results never depend on call order or threading.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of one run seed apart.
pub mod stream {
    pub const FIELD_INIT: u64 = 1;
    pub const CAMERA: u64 = 2;
    pub const SIGMA: u64 = 3;
    pub const PAAS: u64 = 4;
}

/// Generator for draw `counter` of consumer `tag` under `seed`.
pub fn stream_rng(seed: u64, tag: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(counter);
    rng
}

/// Mixes two 64-bit values into one seed (splitmix64 finalizer).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
