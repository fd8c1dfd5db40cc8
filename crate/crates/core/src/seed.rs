//! Labeled seed derivation.
//!
//! One experiment seed fans out into independent component seeds, e.g.
//! `derive(seed, "partition")` or `derive_indexed(seed, "client", &[round, device])`,
//! so any subsystem can be re-seeded without perturbing the others and
//! parallel execution cannot change which stream a client draws from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, label: &str) -> u64 {
    derive_indexed(seed, label, &[])
}

pub fn derive_indexed(seed: u64, label: &str, indices: &[u64]) -> u64 {
    // FNV-1a over the label, then fold everything through SplitMix64
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut acc = mix(seed ^ mix(h));
    for &i in indices {
        acc = mix(acc ^ mix(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    acc
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
