//! Deterministic random substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream derived from `(seed, tag, index)`.
pub fn substream(seed: u64, tag: u64, index: u64) -> Rng {
    let s = splitmix(splitmix(seed ^ splitmix(tag)).wrapping_add(index));
    ChaCha8Rng::seed_from_u64(s)
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod tags {
    pub const CORPUS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const GENERATE: u64 = 6;
}
