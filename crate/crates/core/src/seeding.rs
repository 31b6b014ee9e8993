//! Seed derivation: all randomness flows from a single root seed, split
//! per module by label so one axis can vary while the others stay pinned.
//!
//! Derivation: `derive(root, label) = fnv1a64(le_bytes(root) ++ label)`.
//! FNV-1a is hand-rolled so the mapping is stable across platforms and
//! std releases.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derive a module-scoped seed from the root seed and a label.
pub fn derive(root: u64, label: &str) -> u64 {
    fnv1a64(root.to_le_bytes().into_iter().chain(label.bytes().map(|b| b)))
}

/// Deterministic RNG for a (root seed, label) pair.
pub fn rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label))
}
