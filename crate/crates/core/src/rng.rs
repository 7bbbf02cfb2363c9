//! Named random streams derived from one seed, so each consumer gets an
//! independent and reproducible sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// FNV-1a, used only to map stream names to ChaCha stream ids.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Copy, Debug)]
pub struct StreamSplitter {
    seed: u64,
}

impl StreamSplitter {
    pub fn new(seed: u64) -> Self {
        StreamSplitter { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha20Rng {
        self.indexed(name, &[])
    }

    /// Stream keyed by a name plus integer coordinates, e.g. (kinks, member).
    pub fn indexed(&self, name: &str, index: &[u64]) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        let mut id = fnv1a(name);
        for &i in index {
            id = (id ^ i).wrapping_mul(0x100000001b3).rotate_left(17);
        }
        rng.set_stream(id);
        rng
    }
}
