//! Seed derivation for independent, reproducible random streams.

/// SplitMix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed, a stream label and an index.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = mix64(parent ^ 0x9e37_79b9_7f4a_7c15);
    for &b in label.as_bytes() {
        h = mix64(h ^ b as u64);
    }
    mix64(h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
