//! Seeded random streams.
//!
//! One run seed fans out into independent ChaCha streams, one per purpose,
//! so that e.g. changing the dropout probability never perturbs the noise
//! or timestep draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Noise = 3,
    Timestep = 4,
    Dropout = 5,
    Shuffle = 6,
    Inference = 7,
    Eval = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Stream for a numbered sub-task (sample index, sweep point, ...).
pub fn substream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ (which as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(which as u64);
    rng
}
