//! Seed plumbing shared by the init and data paths.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream seed from a master seed and a purpose tag.
///
/// splitmix64 finalizer; any (master, tag) pair maps to a well-mixed value,
/// so components drawing from different tags never share a stream.
pub(crate) fn subseed(master: u64, tag: u64) -> u64 {
    let mut z = master
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for a (master, tag) pair. The full 256-bit ChaCha
/// seed is built from both words, so distinct pairs give distinct streams.
pub(crate) fn rng_for(master: u64, tag: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&tag.to_le_bytes());
    seed[16..24].copy_from_slice(&0x9E37_79B9_7F4A_7C15u64.to_le_bytes());
    seed[24..32].copy_from_slice(&0xD1B5_4A32_D192_ED03u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
