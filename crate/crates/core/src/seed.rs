//! Seed derivation. Every job's seed depends only on the plan seed and the
//! job's identity, never on scheduling order.

/// SplitMix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, id: u64) -> u64 {
    mix(mix(base) ^ id.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Seed for a labelled purpose ("dataset", "controller-fpn", ...).
pub fn derive_str(base: u64, label: &str) -> u64 {
    label.bytes().fold(mix(base), |acc, b| mix(acc ^ b as u64))
}
