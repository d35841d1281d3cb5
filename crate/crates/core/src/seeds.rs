//! Named random substreams derived from one root seed. Corpus synthesis,
//! initialization, dropout and sampling each draw from their own stream, and
//! a whole run is a function of the root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::fnv1a;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn substream_seed(root: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(name.as_bytes())).wrapping_add(splitmix64(index)))
}

pub fn substream(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_distinct_and_stable() {
        assert_eq!(substream_seed(7, "corpus", 0), substream_seed(7, "corpus", 0));
        assert_ne!(substream_seed(7, "corpus", 0), substream_seed(7, "corpus", 1));
        assert_ne!(substream_seed(7, "corpus", 0), substream_seed(7, "dropout", 0));
        assert_ne!(substream_seed(7, "corpus", 0), substream_seed(8, "corpus", 0));
    }
}
