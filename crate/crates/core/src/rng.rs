//! Reproducible random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator whose key is
//! derived by hashing a root seed together with a path of `u64` labels (draw
//! index, channel, row, ...). Frames and rows therefore never share state and
//! the output does not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep substreams of different subsystems apart.
pub mod domain {
    pub const PHASE: u64 = 0x50_4841_5345;
    pub const POISSON: u64 = 0x50_4f49_5353;
    pub const SIM_FPN: u64 = 0x46_504e;
    pub const SIM_HOT: u64 = 0x48_4f54;
    pub const SIM_BAND: u64 = 0x4241_4e44;
    pub const SIM_READ: u64 = 0x5245_4144;
    pub const SIM_SCENE: u64 = 0x53_4345_4e45;
    pub const SIM_PHOTON: u64 = 0x5048_4f54;
    pub const PICK: u64 = 0x5049_434b;
    pub const CROP: u64 = 0x4352_4f50;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the substream addressed by `path` under `seed`.
pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p));
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        h = splitmix64(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
