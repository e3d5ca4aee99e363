//! Keyed random streams.
//!
//! Every random decision draws from a ChaCha stream derived from
//! `(seed, epoch, tile, purpose)`, so results do not depend on the order in
//! which tiles are processed or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Crop = 1,
    Truncate = 2,
    Select = 3,
    Augment = 4,
    Mask = 5,
    Init = 6,
    Shuffle = 7,
    Generate = 8,
    Split = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed: u64,
    pub epoch: u64,
    pub tile: u64,
    pub purpose: Purpose,
}

impl RngKey {
    pub fn new(seed: u64, epoch: u64, tile: u64, purpose: Purpose) -> Self {
        Self { seed, epoch, tile, purpose }
    }

    /// Sub-key, e.g. one stream per modality inside a tile.
    pub fn with_purpose(self, purpose: Purpose) -> Self {
        Self { purpose, ..self }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        self.rng_sub(0)
    }

    pub fn rng_sub(&self, sub: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let words = [
            splitmix(self.seed),
            splitmix(self.epoch ^ 0xA5A5_A5A5),
            splitmix(self.tile.wrapping_mul(0x2545_F491_4F6C_DD1D)),
            splitmix((self.purpose as u64) << 32 ^ sub),
        ];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
