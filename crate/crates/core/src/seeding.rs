//! Deterministic derivation of per-task RNG streams.
//!
//! Every stochastic step (shuffles, augmentation, dropout, init) draws from a
//! stream keyed by the global seed plus its coordinates, so results do not
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, stable across platforms and toolchains.
fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Copy, Debug)]
pub enum SeedPart<'a> {
    Int(u64),
    Tag(&'a str),
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::Int(v)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(v: usize) -> Self {
        SeedPart::Int(v as u64)
    }
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(v: &'a str) -> Self {
        SeedPart::Tag(v)
    }
}

pub fn derive_seed(global: u64, parts: &[SeedPart<'_>]) -> u64 {
    parts.iter().fold(splitmix64(global), |acc, part| {
        let v = match *part {
            SeedPart::Int(v) => splitmix64(v),
            SeedPart::Tag(s) => hash_str(s),
        };
        splitmix64(acc ^ v.rotate_left(17))
    })
}

pub fn rng_for(global: u64, parts: &[SeedPart<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, parts))
}

#[macro_export]
macro_rules! stream {
    ($seed:expr $(, $part:expr)* $(,)?) => {
        $crate::seeding::rng_for($seed, &[$($crate::seeding::SeedPart::from($part)),*])
    };
}
