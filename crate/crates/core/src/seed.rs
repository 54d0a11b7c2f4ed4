//! One `u64` seed expanded into independent per-purpose streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Corpus = 1,
    Init = 2,
    Shuffle = 3,
    Trials = 4,
    Templates = 5,
    Eval = 6,
}

/// Independent generator for `(seed, stream, index)`: ChaCha keyed by the
/// seed, with the stream id selecting the ChaCha stream.
pub fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
