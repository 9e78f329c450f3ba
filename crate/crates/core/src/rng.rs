//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by `(seed, purpose, counter)`, so a run can be replayed or resumed
//! from any iteration without carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent random streams used by the training pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Init = 2,
    LabeledOrder = 3,
    UnlabeledOrder = 4,
    SegAugment = 5,
    Dropout = 6,
    MlmtAugment = 7,
    Scene = 8,
    Eval = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, counter: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream as u64) ^ counter)
}

pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, counter))
}
