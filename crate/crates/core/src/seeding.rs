//! Deterministic RNG seeding.
//!
//! All randomness in a run flows from one `u64` seed. Each module (and each
//! per-sample stream inside a module) derives a child seed as
//! `seed XOR fnv1a64(name)`, so seeds are stable across platforms and
//! invocations and independent streams never share state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash. Stable across platforms and releases.
pub fn stable_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Child seed for a named module or stream.
pub fn child_seed(seed: u64, name: &str) -> u64 {
    seed ^ stable_hash(name)
}

/// Seeded generator for a named module.
pub fn module_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, name))
}

/// Per-sample generator: a stream keyed by module name and sample id.
pub fn sample_rng(seed: u64, module: &str, sample_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(child_seed(seed, module), sample_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn hash_is_stable() {
        // Frozen values: changing them silently would break reproducibility.
        assert_eq!(stable_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(stable_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn streams_are_independent_and_deterministic() {
        let mut a1 = module_rng(7, "scoring");
        let mut a2 = module_rng(7, "scoring");
        let mut b = module_rng(7, "mining");
        let xs: Vec<u32> = (0..4).map(|_| a1.random()).collect();
        let ys: Vec<u32> = (0..4).map(|_| a2.random()).collect();
        let zs: Vec<u32> = (0..4).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn sample_streams_differ_by_id() {
        let mut a: ChaCha8Rng = sample_rng(0, "generate", "img_0");
        let mut b: ChaCha8Rng = sample_rng(0, "generate", "img_1");
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }
}
