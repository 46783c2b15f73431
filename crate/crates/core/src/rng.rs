//! Named random streams fanned out from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives independent seeds per purpose ("init", "shuffle", ...) so that
/// adding a consumer never perturbs the others.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    master: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, name: &str) -> u64 {
        splitmix64(self.master ^ fnv1a(name))
    }

    pub fn seed_indexed(&self, name: &str, index: u64) -> u64 {
        splitmix64(self.seed(name).wrapping_add(splitmix64(index)))
    }

    pub fn child(&self, name: &str) -> SeedStream {
        SeedStream::new(self.seed(name))
    }

    pub fn rng(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.seed(name))
    }

    pub fn rng_indexed(&self, name: &str, index: u64) -> Rng {
        Rng::seed_from_u64(self.seed_indexed(name, index))
    }
}
