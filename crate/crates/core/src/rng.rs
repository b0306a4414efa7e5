//! Reproducible random streams.
//!
//! Every replicate draws from its own ChaCha8 stream, selected by
//! `(master_seed, replicate_index)`. ChaCha is counter based, so streams are
//! independent and a replicate's numbers do not depend on which thread or in
//! which order it runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Generator for replicate `index` under `master_seed`.
pub fn substream(master_seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}
