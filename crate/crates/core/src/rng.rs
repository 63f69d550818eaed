//! Seeded random substreams.
//!
//! Every consumer of randomness derives its own generator from the global seed,
//! a domain tag and a few integer keys (epoch, sample index, ...), so results do
//! not depend on the order in which workers happen to run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Split = 2,
    Shuffle = 3,
    Augment = 4,
    Dropout = 5,
    Preview = 6,
    Synthetic = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: Domain, keys: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed ^ splitmix64(domain as u64));
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}
