//! Seed derivation: every stochastic component gets its own ChaCha8 stream
//! derived from the run seed, so component order never perturbs the draws of
//! another component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams within one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Env = 2,
    Action = 3,
    Replay = 4,
    Augment = 5,
    Noise = 6,
    Eval = 7,
}

/// RNG for one (seed, stream) pair.
pub fn derive(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// RNG for one (seed, stream, index) triple, e.g. per evaluation episode.
pub fn derive_indexed(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream as u64) << 32 | index);
    rng
}

/// Serializable snapshot of a ChaCha8 stream position.
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn snapshot(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}
