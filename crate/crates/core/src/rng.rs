//! Seeded randomness. Every stochastic choice in the pipeline draws from a
//! generator derived from `(global_seed, step, sample_index, ...)`, so a run
//! is reproducible regardless of how per-sample work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered list of integers into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x6A09_E667_F3BC_C908u64;
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

/// A generator keyed by an ordered list of integers.
pub fn rng_for(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(parts))
}

/// Stream tags keep the derived generators of different consumers apart.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const MIX: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const DOWNSTREAM: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 3, 2]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
        let mut a = rng_for(&[7, 0]);
        let mut b = rng_for(&[7, 0]);
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
