//! Deterministic random streams.
//!
//! Every stochastic component draws from its own counter-based stream keyed
//! by `(seed, purpose)`, so adding or removing one source of randomness
//! never perturbs the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness consumers. The discriminant selects the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ParamInit = 0,
    Shuffle = 1,
    ModalityDropout = 2,
    FeatureDropout = 3,
    ReparamNoise = 4,
    Synthetic = 5,
    Folds = 6,
    Censoring = 7,
}

/// RNG for one `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
