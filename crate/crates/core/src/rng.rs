//! Seeded random sources and deterministic sub-seed derivation.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

/// The random source used throughout the crate.
pub type SimRng = Xoshiro256PlusPlus;

/// Root seed of a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> SimRng {
        Xoshiro256PlusPlus::seed_from_u64(self.0)
    }

    /// Derive an independent child seed for work unit `index`.
    ///
    /// Children depend only on `(self, index)`, never on evaluation order, so
    /// parallel work units reproduce serial results bit for bit.
    pub fn derive(self, index: u64) -> RngSeed {
        RngSeed(splitmix64(
            self.0 ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)),
        ))
    }

    /// Two-level derivation, e.g. (scan position, emitter).
    pub fn derive2(self, a: u64, b: u64) -> RngSeed {
        self.derive(a).derive(b)
    }
}

impl Default for RngSeed {
    fn default() -> Self {
        RngSeed(2025)
    }
}

impl From<u64> for RngSeed {
    fn from(seed: u64) -> Self {
        RngSeed(seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
