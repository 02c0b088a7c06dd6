//! Named sub-seed derivation so every component draws from its own stream.

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the component called `name` under the root `seed`.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(seed ^ mix(h))
}

/// Seed for the `index`-th draw of a stream.
pub fn indexed(seed: u64, index: u64) -> u64 {
    mix(mix(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_separate_streams() {
        assert_ne!(sub_seed(42, "teacher"), sub_seed(42, "data"));
        assert_ne!(sub_seed(42, "teacher"), sub_seed(43, "teacher"));
        assert_eq!(sub_seed(42, "pairs"), sub_seed(42, "pairs"));
        assert_ne!(indexed(7, 0), indexed(7, 1));
    }
}
