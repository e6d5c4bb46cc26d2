use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::grid::Grid;
use crate::error::{Error, Result};

/// Key of a reproducible random stream.
///
/// The generator behind it is counter based (ChaCha keyed by `seed`, nonce
/// `stream`), so a `(seed, stream)` pair always yields the same sequence
/// regardless of which thread draws it or in which order sibling streams are
/// consumed. Fan out with [`RandomSource::derive`] instead of sharing a
/// mutable generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct RandomSource {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RandomSource {
    pub const fn new(seed: u64, stream: u64) -> Self {
        RandomSource { seed, stream }
    }

    /// Child stream identified by `tag`. Distinct tags give distinct streams.
    pub fn derive(&self, tag: u64) -> RandomSource {
        RandomSource {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }

    /// Child stream keyed by a label, for readable fan-out (`"noise"`, `"init"`).
    pub fn derive_named(&self, label: &str) -> RandomSource {
        // FNV-1a; stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.derive(h)
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Grid of i.i.d. standard normal values drawn from `rng`'s stream.
pub fn gaussian_grid(rng: RandomSource, h: usize, w: usize, c: usize) -> Result<Grid> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!("gaussian_grid needs positive dims, got {h}x{w}x{c}")));
    }
    let mut r = rng.rng();
    let data = (0..h * w * c).map(|_| StandardNormal.sample(&mut r)).collect();
    Grid::from_vec(h, w, c, data)
}
