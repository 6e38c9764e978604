//! Named, hierarchical seed derivation.
//!
//! Every random stream in the crate is derived from a master seed via
//! `derive_seed(master, stream, indices)`. The derivation is a stable
//! FNV-1a hash with a splitmix64 finalizer, so identical inputs give
//! identical streams on every platform and every run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[inline]
fn fnv1a_byte(h: u64, b: u8) -> u64 {
    (h ^ b as u64).wrapping_mul(FNV_PRIME)
}

fn fnv1a_u64(mut h: u64, v: u64) -> u64 {
    for b in v.to_le_bytes() {
        h = fnv1a_byte(h, b);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for the stream `name` with the given indices.
pub fn derive_seed(master: u64, name: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a_u64(FNV_OFFSET, master);
    for &b in name.as_bytes() {
        h = fnv1a_byte(h, b);
    }
    h = fnv1a_byte(h, 0xff); // separator between name and indices
    for &ix in indices {
        h = fnv1a_u64(h, ix);
    }
    splitmix64(h)
}

/// Deterministic RNG for a derived stream.
pub fn stream_rng(master: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name, indices))
}

/// RNG directly from a raw seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
