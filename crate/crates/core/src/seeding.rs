//! Deterministic split of one root seed into independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Consumers of randomness inside one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Noise = 1,
    Minibatch = 2,
    InitialState = 3,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Seed of run `index` in a multi-run experiment.
pub fn run_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}
