//! Named seed derivation.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(master_seed, component, coordinates...)`, so regenerating any single
//! view or model is independent of the order work is scheduled in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a; stable across platforms and toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a master seed, a component name and coordinates.
pub fn derive_seed(master: u64, component: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix(master ^ tag_hash(component));
    for &c in coords {
        h = splitmix(h ^ c.wrapping_mul(GOLDEN));
    }
    h
}

pub fn stream(master: u64, component: &str, coords: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(master, component, coords))
}

pub fn seeded(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_depend_on_every_coordinate() {
        let a = derive_seed(1, "gen", &[0, 0, 0]);
        assert_ne!(a, derive_seed(1, "gen", &[0, 0, 1]));
        assert_ne!(a, derive_seed(1, "gen", &[1, 0, 0]));
        assert_ne!(a, derive_seed(2, "gen", &[0, 0, 0]));
        assert_ne!(a, derive_seed(1, "teacher", &[0, 0, 0]));
        assert_eq!(a, derive_seed(1, "gen", &[0, 0, 0]));
        let x: u64 = stream(5, "x", &[3]).random();
        let y: u64 = stream(5, "x", &[3]).random();
        assert_eq!(x, y);
    }
}
