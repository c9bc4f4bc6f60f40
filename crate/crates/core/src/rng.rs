//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed plus a path of integer labels, so results never depend on which
//! worker happens to run a task or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

// Stream labels. Keep these distinct; they namespace the derived seeds.
pub const STREAM_INIT: u64 = 0x11;
pub const STREAM_DATA: u64 = 0x22;
pub const STREAM_PARTITION: u64 = 0x33;
pub const STREAM_CLIENT: u64 = 0x44;
pub const STREAM_SAMPLE_NOISE: u64 = 0x55;
pub const STREAM_GENERATE: u64 = 0x66;
pub const STREAM_EVAL: u64 = 0x77;
pub const STREAM_CLASSIFIER: u64 = 0x88;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of labels into a single 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn substream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

pub fn normal(rng: &mut Rng) -> f32 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f32]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}
