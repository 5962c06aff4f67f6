//! Named random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Noise = 3,
    Pgd = 4,
    Rcs = 5,
    Shuffle = 6,
    SmoothGrad = 7,
    Theory = 8,
}

/// Independent generator for `stream`; same `(root, stream)` always yields
/// the same sequence.
pub fn stream(root: u64, stream: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng
}

/// Sub-stream for an indexed item (per-example, per-config) of a stream.
pub fn substream(root: u64, stream: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((stream as u64) << 32) | (index & 0xFFFF_FFFF));
    rng
}
