//! Deterministic seed derivation. Every random stream in the crate is a
//! ChaCha8 generator seeded through [`mix_seed`], so reruns are bit-exact
//! and substreams (per sample, per epoch, per fold) are independent.

/// Splitmix64-style mix of a base seed and a salt.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
