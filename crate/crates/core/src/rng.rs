//! Seed derivation.
//!
//! Every random stream in an experiment is derived from the master seed by
//! hashing a path of labels with SplitMix64, e.g. `["client", 3, "train"]`.
//! Streams therefore do not depend on the order in which tasks run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// One label in a seed path.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Tag(&'a str),
    Index(u64),
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(s: &'a str) -> Self {
        SeedPart::Tag(s)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(i: usize) -> Self {
        SeedPart::Index(i as u64)
    }
}

impl From<u64> for SeedPart<'_> {
    fn from(i: u64) -> Self {
        SeedPart::Index(i)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn absorb(state: u64, word: u64) -> u64 {
    splitmix64(state ^ splitmix64(word))
}

/// Derive a child seed from `seed` and a path of labels.
pub fn derive_seed(seed: u64, path: &[SeedPart<'_>]) -> u64 {
    let mut state = splitmix64(seed);
    for part in path {
        state = match *part {
            SeedPart::Tag(tag) => {
                // length prefix keeps ["ab","c"] and ["a","bc"] apart
                let mut s = absorb(state, 0xA5A5_0000_0000_0000 | tag.len() as u64);
                for chunk in tag.as_bytes().chunks(8) {
                    let mut buf = [0u8; 8];
                    buf[..chunk.len()].copy_from_slice(chunk);
                    s = absorb(s, u64::from_le_bytes(buf));
                }
                s
            }
            SeedPart::Index(i) => absorb(absorb(state, 0x5A5A_0000_0000_0001), i),
        };
    }
    state
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// `derive_seed` followed by `rng_from`.
pub fn stream(seed: u64, path: &[SeedPart<'_>]) -> Rng {
    rng_from(derive_seed(seed, path))
}

#[macro_export]
macro_rules! seed_path {
    ($($part:expr),* $(,)?) => {
        &[$($crate::rng::SeedPart::from($part)),*]
    };
}
