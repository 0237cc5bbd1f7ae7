//! Seed derivation for the independent random streams used by a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Purpose tags keep the streams of one experiment independent of each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Init = 1,
    Sampling = 2,
    Mixing = 3,
    Data = 4,
    Graph = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed for the given purpose from a master seed.
pub fn derive_seed(master: u64, tag: StreamTag) -> u64 {
    splitmix64(master ^ splitmix64(tag as u64))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tagged_stream(master: u64, tag: StreamTag) -> Stream {
    stream(derive_seed(master, tag))
}

/// Draws `k` distinct items uniformly (partial Fisher-Yates shuffle over a
/// copy of `items`). Returns all items, shuffled, when `k >= items.len()`.
pub fn sample_without_replacement<R: rand::Rng + ?Sized>(
    items: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut pool = items.to_vec();
    let k = k.min(pool.len());
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
