//! Named random streams derived from one run seed.
//!
//! All randomness uses ChaCha8 (`rand_chacha::ChaCha8Rng`), which produces
//! the same sequence on every platform. A stream is the run seed plus a
//! stream id; `index` further splits a stream, e.g. per epoch or per step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split,
    Crops,
    TrainNoise,
    EvalNoise,
    Shuffle,
    Solver,
    Synthetic,
    Init,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Split => 1,
            Stream::Crops => 2,
            Stream::TrainNoise => 3,
            Stream::EvalNoise => 4,
            Stream::Shuffle => 5,
            Stream::Solver => 6,
            Stream::Synthetic => 7,
            Stream::Init => 8,
        }
    }
}

pub fn stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((which.id() << 48) ^ index);
    rng
}

/// Mixes `index` into `seed` (SplitMix64 finaliser), giving well-separated
/// seeds for per-step or per-worker streams.
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
