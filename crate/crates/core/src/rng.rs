//! Seeded random streams. Every stochastic step draws from a stream keyed by
//! the run seed plus a small tuple of indices, so runs are reproducible and
//! independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(splitmix(seed))
}

/// Stream for `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ k.wrapping_mul(0xA24B_AED4_963E_E407));
    }
    Rng::seed_from_u64(h)
}

// Stream domains, so that e.g. (seed, task 3) for sampling never collides with
// (seed, task 3) for initialization.
pub const DOMAIN_SPLIT: u64 = 1;
pub const DOMAIN_AE: u64 = 2;
pub const DOMAIN_KMEANS: u64 = 3;
pub const DOMAIN_INIT: u64 = 4;
pub const DOMAIN_TASK: u64 = 5;
pub const DOMAIN_AUGMENT: u64 = 6;
pub const DOMAIN_META_TEST: u64 = 7;
pub const DOMAIN_MF: u64 = 8;
pub const DOMAIN_SYNTH: u64 = 9;
pub const DOMAIN_ORDER: u64 = 10;
